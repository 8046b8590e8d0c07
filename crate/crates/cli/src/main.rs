fn main() {
    let code = deeptransfer_cli::main_with_args(std::env::args_os().skip(1), &mut std::io::stdout().lock());
    std::process::exit(code);
}
