fn main() {
    std::process::exit(featprobe::main_with(std::env::args_os()));
}
