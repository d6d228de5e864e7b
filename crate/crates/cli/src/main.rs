fn main() {
    longsum::init_logging();
    if let Err(e) = longsum::run(std::env::args_os().collect()) {
        eprintln!("{}", e.line());
        std::process::exit(e.exit_code());
    }
}
