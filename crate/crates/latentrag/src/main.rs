fn main() { std::process::exit(latentrag::cli::run()); }
