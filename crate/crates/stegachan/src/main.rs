use clap::Parser;

fn main() {
    stegachan::init_thread_pool();
    let cli = stegachan::cli::Cli::parse();
    std::process::exit(stegachan::cli::run(cli));
}
