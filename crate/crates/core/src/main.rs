fn main() { std::process::exit(specgym::harness::run_cli(std::env::args_os())); }
