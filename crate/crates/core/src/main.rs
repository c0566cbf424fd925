fn main() {
    std::process::exit(intrinsic_filter::cli::main());
}
