fn main() {
    if let Err(e) = selfspec::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
