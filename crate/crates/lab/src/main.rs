fn main() -> std::process::ExitCode {
    chamferlab::cli::main()
}
