fn main() {
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .try_init();
    std::process::exit(biolm::cli::run(std::env::args_os()));
}
