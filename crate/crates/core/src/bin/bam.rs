use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("BAM_LOG", "error")).init();
    std::process::exit(bam_core::cli::main_with_args(std::env::args_os()));
}
