//! Cleaning for noisy Freesound-style descriptions and tag joining.
//!
//! Descriptions may contain light HTML markup and character entities. Cleanup
//! strips `<...>` spans, decodes a small entity subset, collapses whitespace,
//! and truncates to 500 characters (Unicode scalar values, not bytes).

/// Result of cleaning one description, with the truncation flag the CLI needs
/// for its summary counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanOutcome {
    pub text: String,
    pub truncated: bool,
}

const MAX_DESCRIPTION_CHARS: usize = 500;

/// Removes HTML markup and entities, normalizes whitespace, and truncates to
/// 500 characters. Idempotent: cleaning already-clean text is a no-op.
pub fn clean_description(text: &str) -> String {
    clean_description_report(text).text
}

/// Like [`clean_description`] but also reports whether truncation applied.
pub fn clean_description_report(text: &str) -> CleanOutcome {
    // Stripping can expose new entities and decoding can expose new tags
    // ("&lt;b&gt;" decodes to "<b>"), so iterate to a fixpoint. Each pass
    // either leaves the string unchanged or strictly shortens it.
    let mut current = text.to_string();
    loop {
        let next = decode_entities(&strip_tags(&current));
        if next == current {
            break;
        }
        current = next;
    }

    let normalized: String = current.split_whitespace().collect::<Vec<_>>().join(" ");
    let char_count = normalized.chars().count();
    let truncated = char_count > MAX_DESCRIPTION_CHARS;
    let mut text: String = normalized.chars().take(MAX_DESCRIPTION_CHARS).collect();
    // Truncation may leave a trailing separator; drop it so re-cleaning the
    // output changes nothing.
    while text.ends_with(' ') {
        text.pop();
    }
    CleanOutcome { text, truncated }
}

/// Joins tags with a single space, preserving order. Empty input gives "".
pub fn join_tags<S: AsRef<str>>(tags: &[S]) -> String {
    tags.iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Removes every `<...>` span. A `<` with no later `>` is kept as literal
/// text; a `>` with no open span is also literal.
fn strip_tags(input: &str) -> String {
    let mut out = String::with_capacity(input.len());
    let mut rest = input;
    while let Some(open) = rest.find('<') {
        match rest[open..].find('>') {
            Some(close_rel) => {
                out.push_str(&rest[..open]);
                rest = &rest[open + close_rel + 1..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

/// Decodes the named entities {amp, lt, gt, quot, apos, nbsp} and numeric
/// entities (decimal and hex). Unknown or malformed entities pass through.
fn decode_entities(input: &str) -> String {
    let mut out = String::with_capacity(input.len());
    let mut rest = input;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let candidate = &rest[amp..];
        match parse_entity(candidate) {
            Some((decoded, consumed)) => {
                out.push(decoded);
                rest = &candidate[consumed..];
            }
            None => {
                out.push('&');
                rest = &candidate[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Parses one entity at the start of `s` (which begins with '&'). Returns the
/// decoded character and the number of bytes consumed.
fn parse_entity(s: &str) -> Option<(char, usize)> {
    let semi = s.find(';')?;
    let body = &s[1..semi];
    let consumed = semi + 1;
    let decoded = match body {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" => '\'',
        "nbsp" => '\u{a0}',
        _ => {
            let digits = body.strip_prefix('#')?;
            let code = if let Some(hex) = digits.strip_prefix(['x', 'X']) {
                u32::from_str_radix(hex, 16).ok()?
            } else {
                digits.parse::<u32>().ok()?
            };
            char::from_u32(code)?
        }
    };
    Some((decoded, consumed))
}
