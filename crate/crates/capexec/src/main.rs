fn main() {
    std::process::exit(capexec::cli::main());
}
