fn main() {
    std::process::exit(attn_tagger::cli::main_with_args(std::env::args_os()));
}
