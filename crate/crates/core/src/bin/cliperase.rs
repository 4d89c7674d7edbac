fn main() { std::process::exit(cliperase::cli::main()) }
