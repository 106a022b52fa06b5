//! Corpus BLEU and chrF, computed the way sacreBLEU 2.4.0 computes them.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

/// Python's `str.split()` whitespace.
fn is_py_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

fn py_split(text: &str) -> impl Iterator<Item = &str> {
    text.split(is_py_space).filter(|s| !s.is_empty())
}

fn rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    })
}

/// The `13a` tokenizer (mteval-v13a).
pub fn tokenize_13a(line: &str) -> String {
    let mut line = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in rules() {
        line = re.replace_all(&line, *rep).into_owned();
    }
    py_split(&line).collect::<Vec<_>>().join(" ")
}

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct BleuStats {
    pub sys_len: usize,
    pub ref_len: usize,
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
}

fn count_ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(|s| s.to_string()).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

pub(crate) fn bleu_segment(hyp: &str, reference: &str) -> BleuStats {
    let hyp = tokenize_13a(hyp.trim_end_matches(is_py_space));
    let reference = tokenize_13a(reference.trim_end_matches(is_py_space));
    let h: Vec<&str> = py_split(&hyp).collect();
    let r: Vec<&str> = py_split(&reference).collect();
    let mut stats = BleuStats {
        sys_len: h.len(),
        ref_len: r.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let ref_counts = count_ngrams(&r, n);
        let hyp_counts = count_ngrams(&h, n);
        stats.correct[n - 1] = hyp_counts
            .iter()
            .map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        stats.total[n - 1] = h.len().saturating_sub(n - 1);
    }
    stats
}

fn my_log(x: f64) -> f64 {
    if x == 0.0 {
        -9_999_999_999.0
    } else {
        x.ln()
    }
}

/// Exponentially smoothed BLEU with effective order.
pub(crate) fn bleu_from_stats(s: &BleuStats) -> f64 {
    let bp = if s.sys_len < s.ref_len {
        if s.sys_len > 0 {
            (1.0 - s.ref_len as f64 / s.sys_len as f64).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    if s.correct.iter().all(|&c| c == 0) {
        return 0.0;
    }
    let mut precisions = [0.0f64; MAX_ORDER];
    let mut smooth = 1.0;
    let mut eff_order = MAX_ORDER;
    for n in 1..=MAX_ORDER {
        if s.total[n - 1] == 0 {
            break;
        }
        eff_order = n;
        precisions[n - 1] = if s.correct[n - 1] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * s.total[n - 1] as f64)
        } else {
            100.0 * s.correct[n - 1] as f64 / s.total[n - 1] as f64
        };
    }
    let log_sum: f64 = precisions[..eff_order].iter().map(|&p| my_log(p)).sum();
    bp * (log_sum / eff_order as f64).exp()
}

const CHAR_ORDER: usize = 6;
const BETA: f64 = 2.0;

/// `[hyp_count, ref_count, matches]` for each character n-gram order.
pub(crate) type ChrfStats = [[usize; 3]; CHAR_ORDER];

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub(crate) fn chrf_segment(hyp: &str, reference: &str) -> ChrfStats {
    let h: Vec<char> = hyp.chars().filter(|c| !is_py_space(*c)).collect();
    let r: Vec<char> = reference.chars().filter(|c| !is_py_space(*c)).collect();
    let mut stats = [[0; 3]; CHAR_ORDER];
    for n in 1..=CHAR_ORDER {
        let hc = char_ngrams(&h, n);
        let rc = char_ngrams(&r, n);
        let hyp_count: usize = hc.values().sum();
        let ref_count: usize = rc.values().sum();
        let matches = hc
            .iter()
            .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        stats[n - 1] = [if ref_count > 0 { hyp_count } else { 0 }, ref_count, matches];
    }
    stats
}

pub(crate) fn chrf_from_stats(stats: &ChrfStats) -> f64 {
    const EPS: f64 = 1e-16;
    let factor = BETA * BETA;
    let (mut avg_p, mut avg_r, mut order) = (0.0, 0.0, 0usize);
    for &[hyp, reference, matches] in stats {
        let p = if hyp > 0 { matches as f64 / hyp as f64 } else { EPS };
        let r = if reference > 0 {
            matches as f64 / reference as f64
        } else {
            EPS
        };
        if hyp > 0 && reference > 0 {
            avg_p += p;
            avg_r += r;
            order += 1;
        }
    }
    if order == 0 {
        return 0.0;
    }
    avg_p /= order as f64;
    avg_r /= order as f64;
    if avg_p + avg_r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + factor) * avg_p * avg_r / (factor * avg_p + avg_r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_cases() {
        let cases = [
            ("Hello, world.", "Hello , world ."),
            (
                "Im Jahr 2016 kostete das Ticket 1,50 Euro - heute sind es 3.20 Euro.",
                "Im Jahr 2016 kostete das Ticket 1,50 Euro - heute sind es 3.20 Euro .",
            ),
            ("a&amp;b &quot;q&quot; <skipped> x-\ny", "a & b \" q \" xy"),
            ("Er fragte, ob wir 3-4 Tage?", "Er fragte , ob wir 3 - 4 Tage ?"),
            ("www.example.org/daten", "www . example . org / daten"),
            ("« Je reviendrai. »", "« Je reviendrai . »"),
            ("C'est l'histoire", "C'est l'histoire"),
        ];
        for (input, expected) in cases {
            assert_eq!(tokenize_13a(input), expected, "{input:?}");
        }
    }
}
