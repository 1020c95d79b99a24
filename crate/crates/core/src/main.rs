use mdlzoo::cli::{main_with_args, Exit};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = main_with_args(std::env::args_os());
    std::process::exit(match code {
        Exit::Success => 0,
        Exit::User => 1,
        Exit::Internal => 2,
    });
}
