use clap::Parser;

fn main() {
    let cli = amcc::cli::Cli::parse();
    match amcc::cli::run(cli) {
        Ok(path) => println!("wrote {}", path.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
