use std::path::PathBuf;

use clap::Args;
use relay_jscc::evaluation::{collect_record_files, read_records};
use relay_jscc::report;

use crate::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Record files (JSON lines) or directories searched for `*.jsonl`.
    #[arg(required = true)]
    pub records: Vec<PathBuf>,
    /// Directory for the tables and figures.
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
}

pub fn run(a: PlotArgs) -> CliResult<()> {
    let files = collect_record_files(&a.records)?;
    let mut records = Vec::new();
    for f in &files {
        records.extend(read_records(f)?);
    }
    if records.is_empty() {
        return Err(CliError::Usage("no evaluation records found".into()));
    }
    for path in report::emit(&records, &a.out)? {
        println!("{}", path.display());
    }
    Ok(())
}
