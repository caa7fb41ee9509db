use clap::Parser;

fn main() {
    let cli = fbev_cli::Cli::parse();
    match fbev_cli::run(cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(fbev_cli::exit_code(&e));
        }
    }
}
