//! Grammars for the synthetic domains. Each generator emits short,
//! self-contained units (a sentence, an equation, a statement) that documents
//! are assembled from, so no unit ever has to be cut.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Longest unit any generator produces, in bytes.
pub const MAX_UNIT_LEN: usize = 80;

pub trait Generator: Send + Sync {
    fn domain_id(&self) -> &'static str;
    /// One unit, including its trailing separator.
    fn unit(&self, rng: &mut ChaCha8Rng) -> String;
}

pub const DOMAINS: [&str; 5] = ["public_mix", "math_arith", "code_brackets", "news_templates", "verse_lines"];

pub fn generator(domain_id: &str) -> Result<Box<dyn Generator>> {
    Ok(match domain_id {
        "public_mix" => Box::new(PublicMix),
        "math_arith" => Box::new(MathArith),
        "code_brackets" => Box::new(CodeBrackets),
        "news_templates" => Box::new(NewsTemplates),
        "verse_lines" => Box::new(VerseLines),
        other => {
            return Err(Error::Config(format!(
                "unknown domain spec {other:?}; known: {}",
                DOMAINS.join(", ")
            )))
        }
    })
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

pub struct PublicMix;

const P_SUBJ: &[&str] = &[
    "the committee", "a neighbor", "the teacher", "our family", "the gardener", "a traveler", "the students",
    "the baker", "my friend", "the visitors", "a young couple", "the old man",
];
const P_VERB: &[&str] = &["visited", "cleaned", "painted", "described", "planned", "shared", "repaired", "watched", "found", "opened"];
const P_OBJ: &[&str] = &[
    "the old bridge", "a quiet garden", "the library", "a small boat", "the market", "the kitchen", "a long road",
    "the town hall", "a wooden fence", "the river bank",
];
const P_TIME: &[&str] = &["in the morning", "after lunch", "on sunday", "during the autumn", "before dinner", "at noon", "later that week"];
const P_ADJ: &[&str] = &["calm", "pleasant", "busy", "cool", "bright", "ordinary", "gentle", "long"];

impl Generator for PublicMix {
    fn domain_id(&self) -> &'static str {
        "public_mix"
    }

    fn unit(&self, rng: &mut ChaCha8Rng) -> String {
        match rng.random_range(0..3) {
            0 => format!("{} {} {} {}. ", capitalize(pick(rng, P_SUBJ)), pick(rng, P_VERB), pick(rng, P_OBJ), pick(rng, P_TIME)),
            1 => format!("It was a {} day and {} {} {}. ", pick(rng, P_ADJ), pick(rng, P_SUBJ), pick(rng, P_VERB), pick(rng, P_OBJ)),
            _ => format!("{} seemed {} to {}. ", capitalize(pick(rng, P_OBJ)), pick(rng, P_ADJ), pick(rng, P_SUBJ)),
        }
    }
}

pub struct MathArith;

impl Generator for MathArith {
    fn domain_id(&self) -> &'static str {
        "math_arith"
    }

    fn unit(&self, rng: &mut ChaCha8Rng) -> String {
        let (a, b, op, c): (i64, i64, char, i64) = match rng.random_range(0..3) {
            0 => {
                let (a, b) = (rng.random_range(0..100), rng.random_range(0..100));
                (a, b, '+', a + b)
            }
            1 => {
                let (a, b) = (rng.random_range(0..100), rng.random_range(0..100));
                (a, b, '-', a - b)
            }
            _ => {
                let (a, b) = (rng.random_range(0..20), rng.random_range(0..20));
                (a, b, '*', a * b)
            }
        };
        let sep = if rng.random_bool(0.25) { "\n" } else { " " };
        format!("{a} {op} {b} = {c} ;{sep}")
    }
}

pub struct CodeBrackets;

const C_IDENT: &[&str] = &["x", "y", "n", "i", "acc", "buf", "k"];
const C_FUNC: &[&str] = &["f", "g", "len", "push", "min"];
const C_OP: &[&str] = &["+", "-", "*", "<", "=="];

fn code_expr(rng: &mut ChaCha8Rng, depth: usize) -> String {
    let choice = if depth == 0 { rng.random_range(0..2) } else { rng.random_range(0..5) };
    match choice {
        0 => pick(rng, C_IDENT).to_string(),
        1 => rng.random_range(0..10).to_string(),
        2 => format!("({} {} {})", code_expr(rng, depth - 1), pick(rng, C_OP), code_expr(rng, depth - 1)),
        3 => format!("{}({})", pick(rng, C_FUNC), code_expr(rng, depth - 1)),
        _ => format!("[{}, {}]", code_expr(rng, depth - 1), code_expr(rng, depth - 1)),
    }
}

fn code_stmt(rng: &mut ChaCha8Rng, depth: usize) -> String {
    let choice = if depth == 0 { rng.random_range(0..3) } else { rng.random_range(0..6) };
    match choice {
        0 => format!("let {} = {};", pick(rng, C_IDENT), code_expr(rng, 2)),
        1 => format!("{}({});", pick(rng, C_FUNC), code_expr(rng, 1)),
        2 => format!("{}[{}] = {};", pick(rng, C_IDENT), code_expr(rng, 1), code_expr(rng, 1)),
        3 => format!("if ({}) {{ {} }}", code_expr(rng, 1), code_stmt(rng, depth - 1)),
        4 => format!("while ({}) {{ {} }}", code_expr(rng, 1), code_stmt(rng, depth - 1)),
        _ => format!("fn {}({}) {{ {} }}", pick(rng, C_FUNC), pick(rng, C_IDENT), code_stmt(rng, depth - 1)),
    }
}

impl Generator for CodeBrackets {
    fn domain_id(&self) -> &'static str {
        "code_brackets"
    }

    fn unit(&self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let s = code_stmt(rng, 2) + "\n";
            if s.len() <= MAX_UNIT_LEN {
                return s;
            }
        }
    }
}

pub struct NewsTemplates;

const N_ORG: &[&str] = &["ACME CORP", "CITY COUNCIL", "NATIONAL BANK", "HEALTH BOARD", "PORT AUTHORITY", "TECH UNION"];
const N_THING: &[&str] = &["EXPORTS", "PRICES", "HIRING", "RAINFALL", "TRAFFIC", "SALES", "TAXES"];
const N_CITY: &[&str] = &["OSLO", "LIMA", "CAIRO", "DENVER", "PERTH", "KYOTO"];
const N_MONTH: &[&str] = &["JAN", "FEB", "MAR", "APR", "MAY", "JUN", "JUL", "AUG", "SEP", "OCT", "NOV", "DEC"];
const N_VERB: &[&str] = &["REPORTS", "EXPECTS", "DENIES", "CONFIRMS"];

impl Generator for NewsTemplates {
    fn domain_id(&self) -> &'static str {
        "news_templates"
    }

    fn unit(&self, rng: &mut ChaCha8Rng) -> String {
        match rng.random_range(0..3) {
            0 => format!(
                "BREAKING: {} {} {}% RISE IN {}\n",
                pick(rng, N_ORG),
                pick(rng, N_VERB),
                rng.random_range(1..60),
                pick(rng, N_THING)
            ),
            1 => format!(
                "{} ({} {}) - \"{} UP {}%\", SAID {}.\n",
                pick(rng, N_CITY),
                pick(rng, N_MONTH),
                rng.random_range(1..29),
                pick(rng, N_THING),
                rng.random_range(1..40),
                pick(rng, N_ORG)
            ),
            _ => format!("UPDATE {}:{:02} - {} {} {}.\n", rng.random_range(0..24), rng.random_range(0..60), pick(rng, N_CITY), pick(rng, N_THING), pick(rng, N_VERB)),
        }
    }
}

pub struct VerseLines;

const V_NOUN: &[&str] = &["moon", "rose", "sea", "wind", "dove", "star", "vale", "heart", "dawn", "flame"];
const V_ADJ: &[&str] = &["silver", "weary", "golden", "hollow", "tender", "wild", "pale"];
const V_VERB: &[&str] = &["doth weep", "doth sing", "shall fade", "doth burn", "shall sleep", "doth wane"];
const V_END: &[&str] = &[",\n", ";\n", ",\n", "!\n", ".\n\n"];

impl Generator for VerseLines {
    fn domain_id(&self) -> &'static str {
        "verse_lines"
    }

    fn unit(&self, rng: &mut ChaCha8Rng) -> String {
        let body = match rng.random_range(0..3) {
            0 => format!("o {} of {} {}", pick(rng, V_NOUN), pick(rng, V_ADJ), pick(rng, V_NOUN)),
            1 => format!("thy {} {} beneath the {} {}", pick(rng, V_NOUN), pick(rng, V_VERB), pick(rng, V_ADJ), pick(rng, V_NOUN)),
            _ => format!("and thee, {} {}, {}", pick(rng, V_ADJ), pick(rng, V_NOUN), pick(rng, V_VERB)),
        };
        body + pick(rng, V_END)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn units_stay_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in DOMAINS {
            let g = generator(id).unwrap();
            assert_eq!(g.domain_id(), id);
            for _ in 0..2000 {
                let u = g.unit(&mut rng);
                assert!(!u.is_empty() && u.len() <= MAX_UNIT_LEN, "{id}: {u:?}");
                assert!(u.is_ascii());
            }
        }
    }

    #[test]
    fn unknown_domain_is_configuration_error() {
        assert!(matches!(generator("legal_text"), Err(Error::Config(_))));
    }
}
