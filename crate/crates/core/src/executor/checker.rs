use serde::{Deserialize, Serialize};

/// How a final answer is compared with the oracle answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checker {
    #[default]
    ExactMatch,
    /// Both sides parsed as decimals, equal within 1e-6.
    Numeric,
}

const NUMERIC_TOLERANCE: f64 = 1e-6;

impl Checker {
    pub fn evaluate(self, answer: &str, oracle: &str) -> f64 {
        let hit = match self {
            Checker::ExactMatch => normalize(answer) == normalize(oracle),
            Checker::Numeric => match (parse_decimal(answer), parse_decimal(oracle)) {
                (Some(a), Some(b)) => (a - b).abs() <= NUMERIC_TOLERANCE,
                _ => false,
            },
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// Trims and collapses internal whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a plain decimal, ignoring whitespace, a leading `+` and trailing
/// zeros. Rejects anything that is not a finite number.
pub fn parse_decimal(text: &str) -> Option<f64> {
    let cleaned: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let cleaned = cleaned.strip_prefix('+').unwrap_or(&cleaned);
    let valid = !cleaned.is_empty()
        && cleaned
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | 'e' | 'E' | '+'));
    if !valid {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match() {
        assert_eq!(Checker::ExactMatch.evaluate("42", "42"), 1.0);
        assert_eq!(Checker::ExactMatch.evaluate(" 42\n", "42"), 1.0);
        assert_eq!(Checker::ExactMatch.evaluate("41", "42"), 0.0);
    }

    #[test]
    fn numeric() {
        assert_eq!(Checker::Numeric.evaluate("3.140000", "3.14"), 1.0);
        assert_eq!(Checker::Numeric.evaluate(" +3.14 ", "3.14"), 1.0);
        assert_eq!(Checker::Numeric.evaluate("abc", "3.14"), 0.0);
        assert_eq!(Checker::Numeric.evaluate("3.1400011", "3.14"), 0.0);
        assert_eq!(Checker::Numeric.evaluate("inf", "inf"), 0.0);
        assert_eq!(Checker::Numeric.evaluate("NaN", "NaN"), 0.0);
        assert_eq!(Checker::Numeric.evaluate("-0.5", "-.5"), 1.0);
    }
}
