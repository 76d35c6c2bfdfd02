use std::process::ExitCode;

// glibc's allocator fragments badly under the per-step matrix temporaries of
// long training loops; mimalloc keeps the resident set flat.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    ExitCode::from(off2on::cli::run(std::env::args_os()) as u8)
}
