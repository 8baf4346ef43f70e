fn main() {
    std::process::exit(pointvid::cli::main_with(std::env::args_os()));
}
