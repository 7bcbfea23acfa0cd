//! Writes the synthetic demo corpus to data/demo/ in the canonical JSONL
//! format, so the CLI can be exercised without downloading any dataset.
//!
//! Usage: cargo run -p cisper-core --example generate_demo_data

use std::path::Path;

use cisper_core::corpus::Split;
use cisper_core::fixtures::toy_fixture;

fn main() {
    let fixture = toy_fixture(0);
    let out = Path::new("data/demo");
    std::fs::create_dir_all(out).expect("create data/demo");
    for (split, file) in [
        (Split::Train, "train.jsonl"),
        (Split::Validation, "val.jsonl"),
        (Split::Test, "test.jsonl"),
    ] {
        let path = out.join(file);
        fixture.corpora[&split].write_jsonl(&path).expect("write split");
        println!(
            "wrote {} ({} conversations, {} utterances)",
            path.display(),
            fixture.corpora[&split].conversation_count(),
            fixture.corpora[&split].utterance_count()
        );
    }
}
