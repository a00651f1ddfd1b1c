fn main() {
    if let Err(e) = fireseg_cli::run(std::env::args_os()) {
        let msg = format!("{e:#}").replace(['\n', '\r'], " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
