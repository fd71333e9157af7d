fn main() {
    std::process::exit(fdclust::cli::main());
}
