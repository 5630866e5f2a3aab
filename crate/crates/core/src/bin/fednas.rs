#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FEDNAS_LOG", "info")).init();
    std::process::exit(fednas::cli::run(std::env::args_os()));
}
