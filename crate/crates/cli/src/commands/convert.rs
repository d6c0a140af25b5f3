use std::io::Write;
use std::path::PathBuf;

use cedual::data::corpus::{convert_csv_to_jsonl, CorpusFormat};
use cedual::Error;

use crate::error::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub from: CorpusFormat,
    #[arg(long)]
    pub to: CorpusFormat,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn run(args: &ConvertArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if (args.from, args.to) != (CorpusFormat::CsvEd, CorpusFormat::Jsonl) {
        return Err(CliError::Usage(format!(
            "unsupported conversion {} -> {}; only csv-ed -> jsonl is available",
            args.from, args.to
        )));
    }
    let records = convert_csv_to_jsonl(&args.input, &args.output)?;
    eprintln!("wrote {records} dialogues to {}", args.output.display());
    writeln!(stdout, "{{\"dialogues\":{records}}}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}
