use clap::Parser;

fn main() {
    let cli = dermfeat_cli::Cli::parse();
    if let Err(e) = dermfeat_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
