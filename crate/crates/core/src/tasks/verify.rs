use super::vocab::{Vocab, ANS_OPEN, EOS_ANSWER, STOP_MARKER};
use super::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Exact,
    FormatOnly,
    None,
}

/// Extracts the final-value span: everything after the last answer opener
/// (or, failing that, after the last stop marker) up to the first answer
/// closer. Surrounding spaces are ignored.
pub fn extract_span(ids: &[usize]) -> &[usize] {
    let start = if let Some(i) = ids.iter().rposition(|&t| t == ANS_OPEN) {
        i + 1
    } else {
        ids.windows(STOP_MARKER.len())
            .rposition(|w| w == STOP_MARKER)
            .map_or(0, |i| i + STOP_MARKER.len())
    };
    let tail = &ids[start..];
    let end = tail.iter().position(|&t| t == EOS_ANSWER).unwrap_or(tail.len());
    let span = &tail[..end];
    let space = 23;
    let lo = span.iter().position(|&t| t != space).unwrap_or(span.len());
    let hi = span.iter().rposition(|&t| t != space).map_or(lo, |i| i + 1);
    &span[lo..hi]
}

/// Parses a span as a value of the same kind as `label`.
pub fn parse_value(span: &[usize], label: &Label) -> Option<Label> {
    let text = Vocab.decode(span).ok()?;
    match label {
        Label::Number(_) => {
            let digits = text.strip_prefix('-').unwrap_or(&text);
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            text.parse::<i64>().ok().map(Label::Number)
        }
        Label::YesNo(_) => match text.as_str() {
            "yes" => Some(Label::YesNo(true)),
            "no" => Some(Label::YesNo(false)),
            _ => None,
        },
    }
}

/// Exact iff the extracted value equals the label (integers compare by
/// value, so leading zeros are accepted); format-only iff a well-formed
/// value was extracted but differs.
pub fn verify(answer_ids: &[usize], label: &Label) -> Verdict {
    match parse_value(extract_span(answer_ids), label) {
        Some(v) if v == *label => Verdict::Exact,
        Some(_) => Verdict::FormatOnly,
        None => Verdict::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(text: &str) -> Vec<usize> {
        Vocab.encode(text).unwrap()
    }

    #[test]
    fn marker_then_value() {
        let l = Label::Number(42);
        assert_eq!(verify(&ids("1+1 The final answer is: 42"), &l), Verdict::Exact);
        assert_eq!(verify(&ids("The final answer is: 41"), &l), Verdict::FormatOnly);
        assert_eq!(verify(&ids("The final answer is: 4y"), &l), Verdict::None);
    }

    #[test]
    fn boxed_span() {
        let l = Label::Number(42);
        assert_eq!(verify(&ids("{42}"), &l), Verdict::Exact);
        assert_eq!(verify(&ids("42}99"), &l), Verdict::Exact);
        assert_eq!(verify(&ids("{042}"), &l), Verdict::Exact);
        assert_eq!(verify(&ids(" 42 }"), &l), Verdict::Exact);
        assert_eq!(verify(&ids("}"), &l), Verdict::None);
        assert_eq!(verify(&[], &l), Verdict::None);
        assert_eq!(verify(&ids("4+2}"), &l), Verdict::None);
    }

    #[test]
    fn yes_no() {
        let l = Label::YesNo(true);
        assert_eq!(verify(&ids("yes}"), &l), Verdict::Exact);
        assert_eq!(verify(&ids("no}"), &l), Verdict::FormatOnly);
        assert_eq!(verify(&ids("42}"), &l), Verdict::None);
    }
}
