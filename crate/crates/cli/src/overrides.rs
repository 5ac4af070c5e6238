//! `section.key=value` overrides applied on top of a TOML config file.

use toml::{Table, Value};

/// Parses `value` as a TOML literal, falling back to a bare string.
fn literal(value: &str) -> Value {
    format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Returns the config text with every override applied. Later pairs win.
pub fn apply(text: &str, pairs: &[String]) -> Result<String, String> {
    let mut root: Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    for pair in pairs {
        let (key, value) = pair.split_once('=').ok_or_else(|| format!("override {pair:?} is not KEY=VALUE"))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let (last, sections) = path.split_last().filter(|(l, _)| !l.is_empty()).ok_or_else(|| format!("empty key in {pair:?}"))?;
        let mut table = &mut root;
        for s in sections {
            table = table
                .entry(s.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .ok_or_else(|| format!("{s} in {key} is not a section"))?;
        }
        table.insert(last.to_string(), literal(value.trim()));
    }
    toml::to_string(&root).map_err(|e| e.to_string())
}
