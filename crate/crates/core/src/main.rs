fn main() -> std::process::ExitCode {
    clang_nlg::cli::main_exit()
}
