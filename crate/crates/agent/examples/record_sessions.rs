//! Re-records the demonstration cassettes against the development gateway.
//!
//!     cargo run -p feedlens-agent --example record_sessions [out_dir]
//!
//! Writes `<case>.jsonl` (the cassette) and `<case>.expected.json` (the
//! response the replay must reproduce) for every case.

use std::path::PathBuf;
use std::sync::Arc;

use feedlens_agent::demo::{
    bundled_cassettes, development_gateway, render_response, run_case, REPLAY_CASES,
};
use feedlens_core::llm::cassette::Recorder;

fn main() -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(bundled_cassettes);
    std::fs::create_dir_all(&out)?;
    for case in &REPLAY_CASES {
        let cassette = out.join(format!("{}.jsonl", case.name));
        if cassette.exists() {
            std::fs::remove_file(&cassette)?;
        }
        let model = Arc::new(Recorder::new(development_gateway(), &cassette, "none")?);
        let dir = tempfile::tempdir()?;
        let (response, _) = run_case(model, case, dir.path())?;
        std::fs::write(
            out.join(format!("{}.expected.json", case.name)),
            render_response(&response),
        )?;
        println!(
            "{}: {:?}, {} artifact(s) -> {}",
            case.name,
            response.status,
            response.artifacts.len(),
            cassette.display()
        );
    }
    Ok(())
}
