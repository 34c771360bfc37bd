//! Minimal IONEX 1.0 reader/writer covering the map-exchange subset: a
//! header with an EXPONENT record, TEC map blocks with per-latitude rows of
//! fixed-width I5 integers, and optional RMS/height blocks (skipped).

use super::{epoch_from_ymdhms, ymdhms_from_epoch, DataError, RawTecMap, RAW_COLS, RAW_ROWS};

const UNDEFINED: i64 = 9999;

fn label_of(line: &str) -> &str {
    if line.len() > 60 {
        line[60..].trim()
    } else {
        ""
    }
}

fn err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

/// Parse IONEX text into raw maps, values in TECU. Undefined (9999-coded)
/// cells are rejected.
pub fn parse_ionex(text: &str) -> Result<Vec<RawTecMap>, DataError> {
    let mut lines = text.lines().enumerate();
    let mut exponent: i32 = -1;
    let mut saw_header_end = false;
    for (i, line) in lines.by_ref() {
        let label = label_of(line);
        if label == "EXPONENT" {
            exponent = line[..60]
                .trim()
                .parse()
                .map_err(|_| err(i + 1, "unparseable EXPONENT"))?;
        } else if label == "END OF HEADER" {
            saw_header_end = true;
            break;
        }
    }
    if !saw_header_end {
        return Err(err(0, "missing END OF HEADER"));
    }

    let mut maps = Vec::new();
    let mut skipping_block = false;
    while let Some((i, line)) = lines.next() {
        let label = label_of(line);
        match label {
            "START OF TEC MAP" => {
                skipping_block = false;
                let map = parse_tec_map(&mut lines, exponent, i + 1)?;
                maps.push(map);
            }
            "START OF RMS MAP" | "START OF HEIGHT MAP" => {
                skipping_block = true;
            }
            "END OF RMS MAP" | "END OF HEIGHT MAP" => {
                skipping_block = false;
            }
            "END OF FILE" => break,
            _ => {
                if !skipping_block && !label.is_empty() && label != "COMMENT" {
                    // stray labelled line outside any block
                    if label != "EPOCH OF CURRENT MAP" && label != "LAT/LON1/LON2/DLON/H" {
                        return Err(err(i + 1, format!("unexpected record '{label}'")));
                    }
                }
            }
        }
    }
    Ok(maps)
}

fn parse_tec_map<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    exponent: i32,
    start_line: usize,
) -> Result<RawTecMap, DataError> {
    let mut epoch: Option<i64> = None;
    let mut grid = vec![f64::NAN; RAW_ROWS * RAW_COLS];
    let mut rows_seen = 0usize;

    while let Some((i, line)) = lines.next() {
        let label = label_of(line);
        match label {
            "EPOCH OF CURRENT MAP" => {
                let fields: Vec<i64> = line[..60]
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| err(i + 1, "unparseable epoch"))?;
                if fields.len() != 6 {
                    return Err(err(i + 1, "epoch needs 6 fields"));
                }
                epoch = Some(epoch_from_ymdhms(
                    fields[0], fields[1], fields[2], fields[3], fields[4], fields[5],
                ));
            }
            "LAT/LON1/LON2/DLON/H" => {
                let lat = fixed_f64(line, 2, 6, i + 1)?;
                let row_f = (87.5 - lat) / 2.5;
                let row = row_f.round() as i64;
                if (row_f - row as f64).abs() > 1e-6 || !(0..RAW_ROWS as i64).contains(&row) {
                    return Err(err(i + 1, format!("latitude {lat} off the expected grid")));
                }
                let row = row as usize;
                let mut values = Vec::with_capacity(RAW_COLS);
                for (j, data_line) in lines.by_ref() {
                    read_i5_values(data_line, &mut values, exponent, j + 1)?;
                    if values.len() >= RAW_COLS {
                        break;
                    }
                }
                if values.len() != RAW_COLS {
                    return Err(err(
                        i + 1,
                        format!("latitude row has {} values, expected {RAW_COLS}", values.len()),
                    ));
                }
                grid[row * RAW_COLS..(row + 1) * RAW_COLS].copy_from_slice(&values);
                rows_seen += 1;
            }
            "END OF TEC MAP" => {
                if rows_seen != RAW_ROWS {
                    return Err(err(
                        i + 1,
                        format!("map has {rows_seen} latitude rows, expected {RAW_ROWS}"),
                    ));
                }
                let epoch = epoch.ok_or_else(|| err(i + 1, "map block without epoch"))?;
                return Ok(RawTecMap { grid, epoch });
            }
            _ => {}
        }
    }
    Err(err(start_line, "unterminated TEC map block"))
}

fn fixed_f64(line: &str, start: usize, width: usize, lineno: usize) -> Result<f64, DataError> {
    line.get(start..start + width)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err(lineno, "unparseable fixed-width real"))
}

/// Data rows are fixed-width I5 integers, 16 per line; adjacent negative
/// values can touch so whitespace splitting is not safe.
fn read_i5_values(line: &str, out: &mut Vec<f64>, exponent: i32, lineno: usize) -> Result<(), DataError> {
    let bytes = line.as_bytes();
    let mut pos = 0;
    while pos + 5 <= bytes.len() && out.len() < RAW_COLS {
        let field = &line[pos..pos + 5];
        pos += 5;
        let t = field.trim();
        if t.is_empty() {
            continue;
        }
        let v: i64 = t
            .parse()
            .map_err(|_| err(lineno, format!("unparseable value '{t}'")))?;
        if v == UNDEFINED {
            return Err(err(lineno, "undefined (9999) cell"));
        }
        out.push(apply_exponent(v, exponent));
    }
    Ok(())
}

/// Integer-to-TECU scaling; dividing for negative exponents round-trips
/// decimal values exactly through the writer.
fn apply_exponent(v: i64, exponent: i32) -> f64 {
    if exponent < 0 {
        v as f64 / 10f64.powi(-exponent)
    } else {
        v as f64 * 10f64.powi(exponent)
    }
}

fn remove_exponent(v: f64, exponent: i32) -> i64 {
    if exponent < 0 {
        (v * 10f64.powi(-exponent)).round() as i64
    } else {
        (v / 10f64.powi(exponent)).round() as i64
    }
}

/// Serialize maps back to IONEX text (exponent -1, TEC blocks only).
pub fn format_ionex(maps: &[RawTecMap]) -> String {
    let exponent = -1i32;
    let mut s = String::new();
    let push_record = |content: &str, label: &str, s: &mut String| {
        s.push_str(&format!("{content:<60}{label}\n"));
    };
    push_record("     1.0            IONOSPHERE MAPS     GNSS", "IONEX VERSION / TYPE", &mut s);
    push_record(&format!("{:>6}", maps.len()), "# OF MAPS IN FILE", &mut s);
    push_record(&format!("{exponent:>6}"), "EXPONENT", &mut s);
    push_record("", "END OF HEADER", &mut s);

    for (idx, map) in maps.iter().enumerate() {
        push_record(&format!("{:>6}", idx + 1), "START OF TEC MAP", &mut s);
        let (y, mo, d, h, mi, se) = ymdhms_from_epoch(map.epoch);
        push_record(
            &format!("{y:>6}{mo:>6}{d:>6}{h:>6}{mi:>6}{se:>6}"),
            "EPOCH OF CURRENT MAP",
            &mut s,
        );
        for row in 0..RAW_ROWS {
            let lat = 87.5 - row as f64 * 2.5;
            push_record(
                &format!("  {lat:>6.1}{:>6.1}{:>6.1}{:>6.1}{:>6.1}", -180.0, 180.0, 5.0, 450.0),
                "LAT/LON1/LON2/DLON/H",
                &mut s,
            );
            let mut line = String::new();
            for (c, v) in map.grid[row * RAW_COLS..(row + 1) * RAW_COLS].iter().enumerate() {
                line.push_str(&format!("{:>5}", remove_exponent(*v, exponent)));
                if (c + 1) % 16 == 0 {
                    s.push_str(&line);
                    s.push('\n');
                    line.clear();
                }
            }
            if !line.is_empty() {
                s.push_str(&line);
                s.push('\n');
            }
        }
        push_record(&format!("{:>6}", idx + 1), "END OF TEC MAP", &mut s);
    }
    push_record("", "END OF FILE", &mut s);
    s
}
