fn main() {
    std::process::exit(sli_cascade::cli::main());
}
