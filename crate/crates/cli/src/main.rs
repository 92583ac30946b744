fn main() {
    let code = edsep_cli::run(std::env::args_os());
    std::process::exit(code);
}
