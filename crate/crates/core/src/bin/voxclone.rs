fn main() {
    std::process::exit(voxclone::cli::run(std::env::args_os().skip(1)));
}
