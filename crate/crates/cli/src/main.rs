fn main() {
    // subcommands land once the engine crate is in place
    eprintln!("dynaprompt: not wired up yet");
    std::process::exit(2);
}
