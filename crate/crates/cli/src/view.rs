use crate::{resolve_model, CliResult, ViewArgs};

pub fn run(args: &ViewArgs) -> CliResult<()> {
    let model = resolve_model(&args.model)?;
    print!("{}", model.summary()?);
    if model.is_trained() {
        println!("weights sha256: {}", model.content_hash()?);
    }
    Ok(())
}
