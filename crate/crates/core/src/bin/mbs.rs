fn main() -> std::process::ExitCode {
    markov_backstep::cli::main()
}
