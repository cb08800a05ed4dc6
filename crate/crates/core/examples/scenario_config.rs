//! Prints the default two-party scenario as a TOML document, the format
//! accepted by `graphstitch --config`, together with its content hash.

use graphstitch::harness::ScenarioConfig;

fn main() -> graphstitch::Result<()> {
    let s = ScenarioConfig::default();
    let text = s.to_toml()?;
    assert_eq!(ScenarioConfig::from_toml(&text)?, s);
    eprintln!("scenario hash {}", s.hash()?);
    print!("{text}");
    Ok(())
}
