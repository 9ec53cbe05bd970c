//! Name lookup shared by the attack, defense and algorithm registries.

use crate::error::Error;

/// Known names within edit distance 2 (or sharing a normalised prefix),
/// closest first.
pub fn suggest<'a>(name: &str, known: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let needle = normalise(name);
    let mut scored: Vec<(usize, String)> = known
        .into_iter()
        .filter_map(|k| {
            let d = strsim::levenshtein(&needle, &normalise(k));
            (d <= 2 || (needle.len() >= 3 && normalise(k).starts_with(&needle)))
                .then(|| (d, k.to_string()))
        })
        .collect();
    scored.sort();
    scored.dedup_by(|a, b| a.1 == b.1);
    scored.into_iter().map(|(_, k)| k).take(3).collect()
}

/// Lowercase with `-`, `_` and spaces removed, so `multi-krum` == `MultiKrum`.
pub fn normalise(name: &str) -> String {
    name.chars()
        .filter(|c| !matches!(c, '-' | '_' | ' '))
        .flat_map(char::to_lowercase)
        .collect()
}

/// Finds `name` among `(name, item)` entries, or builds an error with
/// suggestions.
pub fn lookup<'a, T>(kind: &'static str, name: &str, entries: &'a [(&'static str, T)]) -> Result<&'a T, Error> {
    let key = normalise(name);
    entries
        .iter()
        .find(|(n, _)| normalise(n) == key)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::UnknownName {
            kind,
            name: name.to_string(),
            suggestions: suggest(name, entries.iter().map(|(n, _)| *n)),
        })
}
