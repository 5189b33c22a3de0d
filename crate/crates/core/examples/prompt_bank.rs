//! Shows template expansion and the averaged text direction for a prompt pair.
//!
//!     cargo run --example prompt_bank

use latent_edit::directions::{encode_prompt_pair, PromptSpec, TemplateBank};
use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};

fn main() -> latent_edit::Result<()> {
    let bank = TemplateBank::imagenet();
    println!("bank {:?} has {} templates", bank.id(), bank.len());
    for sentence in bank.sentences("grey hair").iter().take(4) {
        println!("  {sentence}");
    }

    let custom = TemplateBank::parse("portraits", "a portrait of {}.\na close-up photo of {}.\n")?;
    println!("custom bank: {:?}", custom.sentences("a smile"));

    let backend = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(0))?);
    let spec = PromptSpec::new("a smiling face", "a face")?;
    for b in [&bank, &custom] {
        let t = encode_prompt_pair(&backend, &spec, b)?;
        let head: Vec<String> = t
            .values()
            .iter()
            .take(4)
            .map(|v| format!("{v:+.3}"))
            .collect();
        println!(
            "{:>10}: |dt| = {:.6}, head [{}]",
            b.id(),
            t.norm(),
            head.join(", ")
        );
    }

    match PromptSpec::new("a face", "a face") {
        Err(e) => println!("identical pair rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
