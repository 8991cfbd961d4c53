fn main() {
    multirep::tune_allocator();
    std::process::exit(multirep::cli::run(std::env::args_os()));
}
