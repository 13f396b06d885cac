fn main() {
    std::process::exit(mri_bench::run(std::env::args().collect()));
}
