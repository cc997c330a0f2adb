fn main() { std::process::exit(adk::cli::run()) }
