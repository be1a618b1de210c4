fn main() { std::process::exit(hierclass::cli::run()); }
