use clap::Parser;

fn main() {
    let cli = clmorph_cli::Cli::parse();
    if let Err(err) = clmorph_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(clmorph_cli::exit_code(&err));
    }
}
