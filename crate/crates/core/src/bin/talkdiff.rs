fn main() {
    std::process::exit(talkdiff::cli::run(std::env::args()));
}
