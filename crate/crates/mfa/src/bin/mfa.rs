use std::process::exit;

fn main() {
    exit(mfa::cli::main_dispatch(std::env::args()));
}
