fn main() {
    std::process::exit(sl_audit::cli::dispatch(std::env::args_os()));
}
