//! Pair protocols (`template_id_1,template_id_2,label`) and template id
//! lists for identification.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{Pair, PairLabel, PairProtocol};
use crate::io::{read_to_string, write_atomic};

pub const PAIR_HEADER: &str = "template_id_1,template_id_2,label";

pub fn parse_pair_protocol(text: &str) -> Result<PairProtocol> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PAIR_HEADER => {}
        _ => return Err(Error::MissingColumn("template_id_1".into())),
    }
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::MalformedRow {
                line: i + 1,
                reason: format!("expected 3 columns, found {}", fields.len()),
            });
        }
        let label = match fields[2] {
            "1" => PairLabel::Match,
            "0" => PairLabel::Nonmatch,
            "?" => PairLabel::Unknown,
            other => {
                return Err(Error::MalformedRow {
                    line: i + 1,
                    reason: format!("label `{other}` is not one of 1, 0, ?"),
                })
            }
        };
        pairs.push(Pair {
            template1: fields[0].to_string(),
            template2: fields[1].to_string(),
            label,
        });
    }
    Ok(PairProtocol { pairs })
}

pub fn pair_protocol_string(protocol: &PairProtocol) -> String {
    let mut out = format!("{PAIR_HEADER}\n");
    for p in &protocol.pairs {
        let label = match p.label {
            PairLabel::Match => "1",
            PairLabel::Nonmatch => "0",
            PairLabel::Unknown => "?",
        };
        out.push_str(&format!("{},{},{label}\n", p.template1, p.template2));
    }
    out
}

pub fn load_pair_protocol(path: &Path) -> Result<PairProtocol> {
    parse_pair_protocol(&read_to_string(path)?)
}

pub fn write_pair_protocol(path: &Path, protocol: &PairProtocol) -> Result<()> {
    write_atomic(path, pair_protocol_string(protocol).as_bytes())
}

/// One template id per line; blank lines and `#` comments are skipped.
pub fn parse_id_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn load_id_list(path: &Path) -> Result<Vec<String>> {
    Ok(parse_id_list(&read_to_string(path)?))
}

pub fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_round_trip() {
        let text = "template_id_1,template_id_2,label\na,b,1\n\n# note\nc,d,0\ne,f,?\n";
        let p = parse_pair_protocol(text).unwrap();
        assert_eq!(p.pairs.len(), 3);
        assert_eq!(p.pairs[2].label, PairLabel::Unknown);
        assert_eq!(parse_pair_protocol(&pair_protocol_string(&p)).unwrap(), p);
    }

    #[test]
    fn pair_errors() {
        assert!(matches!(
            parse_pair_protocol("a,b,c\n"),
            Err(Error::MissingColumn(_))
        ));
        assert!(matches!(
            parse_pair_protocol("template_id_1,template_id_2,label\na,b,2\n"),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_pair_protocol("template_id_1,template_id_2,label\na,b\n"),
            Err(Error::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn id_list() {
        assert_eq!(parse_id_list("# g\nt1\n\n  t2 \n"), vec!["t1", "t2"]);
    }
}
