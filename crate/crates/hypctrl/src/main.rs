use std::process::ExitCode;

fn main() -> ExitCode {
    hypctrl::cli::main_entry()
}
