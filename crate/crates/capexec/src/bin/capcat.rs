fn main() {
    std::process::exit(capexec::workloads::main_for("cat"));
}
