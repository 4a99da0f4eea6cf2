fn main() {
    std::process::exit(regime_cvar_cli::run(std::env::args_os()));
}
