use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter("E4_LOG_LEVEL")).init();
    let code = e4::cli::main_with_args(std::env::args_os());
    std::process::exit(code);
}
