fn main() {
    std::process::exit(foreswe::pipeline::cli_main());
}
