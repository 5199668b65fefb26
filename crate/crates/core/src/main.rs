fn main() {
    let code = dino_pretssel::cli::dispatch(std::env::args_os());
    std::process::exit(code);
}
