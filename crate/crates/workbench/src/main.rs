// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(crosstrace::cli::main_with(std::env::args_os()));
}
