fn main() -> std::process::ExitCode {
    mlmc_dropout::cli::main()
}
