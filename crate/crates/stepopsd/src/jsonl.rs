//! Rollout groups as JSON lines, one group per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use stepopsd_core::RolloutGroup;

use crate::error::{Error, Result};

pub fn serialize_group(group: &RolloutGroup) -> String {
    serde_json::to_string(group).expect("rollout groups always serialize")
}

/// Parses one line; `line` and `line_offset` locate it for error reports.
pub fn parse_line<T: DeserializeOwned>(text: &str, line: usize, line_offset: u64) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let column = e.column();
        Error::Parse {
            line,
            column,
            offset: line_offset + column.saturating_sub(1) as u64,
            message: e.to_string(),
        }
    })
}

pub fn deserialize_group(text: &str) -> Result<RolloutGroup> {
    parse_line(text, 1, 0)
}

/// Reads every non-blank line as a `T`, paired with its 1-based line number.
pub fn read_lines<T: DeserializeOwned, R: BufRead>(mut reader: R, path: &Path) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut offset = 0u64;
    let mut line = 0usize;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        line += 1;
        let text = buf.trim_end_matches(['\n', '\r']);
        if !text.trim().is_empty() {
            out.push((line, parse_line(text, line, offset)?));
        }
        offset += n as u64;
    }
    Ok(out)
}

pub fn read_groups<R: BufRead>(reader: R) -> Result<Vec<RolloutGroup>> {
    Ok(read_lines(reader, Path::new("<input>"))?
        .into_iter()
        .map(|(_, g)| g)
        .collect())
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_lines(BufReader::new(f), path)
}

pub fn write_groups<W: Write>(mut w: W, groups: &[RolloutGroup]) -> std::io::Result<()> {
    for g in groups {
        writeln!(w, "{}", serialize_group(g))?;
    }
    w.flush()
}

pub fn write_groups_file(path: &Path, groups: &[RolloutGroup]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_groups(BufWriter::new(f), groups).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use stepopsd_core::{Role, TokenRecord, Trajectory};

    fn group() -> RolloutGroup {
        RolloutGroup {
            group_id: "g0".into(),
            prompt: "<obs> task heat from counter </obs>".into(),
            members: (0..2)
                .map(|i| Trajectory {
                    id: format!("m{i}"),
                    reward: i as f64,
                    success: i == 1,
                    invalid_action_count: 0,
                    tokens: vec![
                        TokenRecord::new("<obs>", Role::Observation, 0.0, 0),
                        TokenRecord::new("go", Role::Action, -0.6931471805599453, 0),
                    ],
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip() {
        let g = group();
        let line = serialize_group(&g);
        assert!(!line.contains('\n'));
        assert_eq!(deserialize_group(&line).unwrap(), g);
    }

    #[test]
    fn missing_field_is_named() {
        let line = serialize_group(&group()).replacen("\"reward\":0.0,", "", 1);
        match deserialize_group(&line) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("`reward`"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_line_reports_offset() {
        let full = serialize_group(&group());
        let text = format!("{full}\n{}\n", &full[..40]);
        match read_groups(text.as_bytes()) {
            Err(Error::Parse { line, offset, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(offset, full.len() as u64 + 1 + column as u64 - 1);
                assert!(offset > full.len() as u64);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn blank_lines_skipped() {
        let full = serialize_group(&group());
        let text = format!("\n{full}\n\n{full}\n");
        assert_eq!(read_groups(text.as_bytes()).unwrap().len(), 2);
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;
        use stepopsd_core::{Role, TokenRecord, Trajectory};

        fn role() -> impl Strategy<Value = Role> {
            prop_oneof![
                Just(Role::Observation),
                Just(Role::Action),
                Just(Role::Reasoning),
                Just(Role::Answer),
                Just(Role::Structural),
            ]
        }

        fn logprob() -> impl Strategy<Value = f64> {
            prop_oneof![
                6 => -60.0f64..=0.0,
                1 => Just(0.0),
                1 => Just(-30.0),
                1 => -1e-300f64..0.0,
            ]
        }

        fn trajectory() -> impl Strategy<Value = Trajectory> {
            (
                "\\PC{0,12}",
                any::<bool>(),
                -2.0f64..0.0,
                0u32..6,
                prop::collection::vec(("\\PC{0,8}", role(), logprob(), 0u32..3), 1..24),
            )
                .prop_map(|(id, success, fail_reward, invalid, raw)| {
                    let mut turn = 0;
                    let tokens = raw
                        .into_iter()
                        .map(|(text, role, lp, step)| {
                            turn += step;
                            TokenRecord::new(text, role, lp, turn)
                        })
                        .collect();
                    Trajectory {
                        id,
                        reward: if success { 1.0 } else { fail_reward },
                        success,
                        invalid_action_count: invalid,
                        tokens,
                    }
                })
        }

        /// Valid rollout groups with arbitrary text, including quotes and escapes.
        fn group() -> impl Strategy<Value = RolloutGroup> {
            ("\\PC{0,16}", "\\PC{0,40}", prop::collection::vec(trajectory(), 2..6)).prop_map(
                |(group_id, prompt, members)| RolloutGroup {
                    group_id,
                    prompt,
                    members,
                },
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn roundtrip_is_identity(g in group()) {
                prop_assert!(g.validate().is_empty());
                let line = serialize_group(&g);
                prop_assert!(!line.contains('\n'));
                let back = deserialize_group(&line).unwrap();
                prop_assert_eq!(&back, &g);
                prop_assert_eq!(serialize_group(&back), line);
            }

            #[test]
            fn file_roundtrip(groups in prop::collection::vec(group(), 0..6)) {
                let mut buf = Vec::new();
                write_groups(&mut buf, &groups).unwrap();
                let back = read_groups(buf.as_slice()).unwrap();
                prop_assert_eq!(back, groups);
            }
        }
    }
}
