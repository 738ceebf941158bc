fn main() {
    std::process::exit(roadgps::cli::main());
}
