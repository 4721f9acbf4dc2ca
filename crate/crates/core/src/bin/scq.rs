fn main() {
    std::process::exit(scq::cli::main_entry());
}
