fn main() {
    let r = tiersim::cli::run_cli(std::env::args_os());
    if r.exit_code == 0 {
        println!("{}", r.log);
    } else {
        eprintln!("{}", r.log);
    }
    std::process::exit(r.exit_code);
}
