fn main() {
    std::process::exit(nrlab::run(std::env::args_os()));
}
