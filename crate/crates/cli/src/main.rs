fn main() -> std::process::ExitCode {
    ramer_cli::main_entry()
}
