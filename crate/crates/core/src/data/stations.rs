use std::path::Path;

use crate::error::{Error, FormatError, Result};

use super::{normalize, normalize_direction, wind_to_uv, Variable};

pub const CSV_COLUMNS: [&str; 8] = [
    "station_id",
    "lon",
    "lat",
    "altitude_m",
    "time_iso8601",
    "temp_c",
    "wind_ms",
    "wind_dir_deg",
];

/// One station at one time. `None` marks a missing (masked) variable; wind
/// counts as valid only when both speed and direction are present.
#[derive(Clone, Debug, PartialEq)]
pub struct StationObservation {
    pub station_id: String,
    pub lon: f64,
    pub lat: f64,
    pub altitude: f64,
    pub time: String,
    pub temperature: Option<f64>,
    pub wind_speed: Option<f64>,
    /// Meteorological bearing in `[0, 360)`.
    pub wind_dir: Option<f64>,
}

impl StationObservation {
    pub fn wind_uv(&self) -> Option<(f64, f64)> {
        match (self.wind_speed, self.wind_dir) {
            (Some(s), Some(d)) => wind_to_uv(s, d).ok(),
            _ => None,
        }
    }

    /// Normalised `[temperature, u, v]` and their validity.
    pub fn channels(&self) -> ([f64; 3], [bool; 3]) {
        let t = self.temperature.map(|t| normalize(Variable::Temperature, t));
        let uv = self.wind_uv();
        (
            [
                t.unwrap_or(0.0),
                uv.map_or(0.0, |w| normalize(Variable::WindComponent, w.0)),
                uv.map_or(0.0, |w| normalize(Variable::WindComponent, w.1)),
            ],
            [t.is_some(), uv.is_some(), uv.is_some()],
        )
    }

    pub fn position(&self) -> (f64, f64) {
        (self.lon, self.lat)
    }
}

pub fn load_stations_csv(path: &Path) -> Result<Vec<StationObservation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_stations_csv(&text)
}

pub fn parse_stations_csv(text: &str) -> Result<Vec<StationObservation>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| FormatError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(FormatError::MissingHeader.into());
    }
    let mut index = [0usize; 8];
    for (slot, name) in index.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FormatError::MissingColumn(name.to_string()))?;
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths {
                pos,
                expected_len,
                len,
            } => FormatError::FieldCount {
                line: pos.as_ref().map_or(0, |p| p.line()),
                expected: *expected_len as usize,
                found: *len as usize,
            },
            _ => FormatError::Csv {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            },
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(index[i]).unwrap_or("");
        let number = |i: usize| -> Result<Option<f64>, FormatError> {
            let raw = field(i);
            if raw.is_empty() {
                return Ok(None);
            }
            let v: f64 = raw.parse().map_err(|_| FormatError::MalformedNumber {
                line,
                column: CSV_COLUMNS[i].into(),
                value: raw.into(),
            })?;
            if !v.is_finite() {
                return Err(FormatError::InvalidField {
                    line,
                    column: CSV_COLUMNS[i].into(),
                    reason: "value must be finite".into(),
                });
            }
            Ok(Some(v))
        };
        let required = |i: usize, v: Option<f64>| {
            v.ok_or_else(|| FormatError::InvalidField {
                line,
                column: CSV_COLUMNS[i].into(),
                reason: "required value is empty".into(),
            })
        };
        let station_id = field(0).to_string();
        if station_id.is_empty() {
            return Err(FormatError::InvalidField {
                line,
                column: "station_id".into(),
                reason: "required value is empty".into(),
            }
            .into());
        }
        let time = field(4).to_string();
        if time.is_empty() {
            return Err(FormatError::InvalidField {
                line,
                column: "time_iso8601".into(),
                reason: "required value is empty".into(),
            }
            .into());
        }
        let wind_speed = number(6)?;
        if wind_speed.is_some_and(|s| s < 0.0) {
            return Err(FormatError::InvalidField {
                line,
                column: "wind_ms".into(),
                reason: "wind speed must be non-negative".into(),
            }
            .into());
        }
        out.push(StationObservation {
            station_id,
            lon: required(1, number(1)?)?,
            lat: required(2, number(2)?)?,
            altitude: required(3, number(3)?)?,
            time,
            temperature: number(5)?,
            wind_speed,
            wind_dir: number(7)?.map(normalize_direction),
        });
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serialises observations with the fixed column order; values use the
/// shortest representation that parses back to the same `f64`.
pub fn render_stations_csv(observations: &[StationObservation]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for o in observations {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            o.station_id,
            o.lon,
            o.lat,
            o.altitude,
            o.time,
            opt(o.temperature),
            opt(o.wind_speed),
            opt(o.wind_dir)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "station_id,lon,lat,altitude_m,time_iso8601,temp_c,wind_ms,wind_dir_deg\n";

    #[test]
    fn parses_three_rows() {
        let text = format!(
            "{HEADER}A,135.1,35.2,10,2018-01-01T00:00:00Z,5.5,3.0,90\n\
             B,135.2,35.3,250.5,2018-01-01T00:00:00Z,2.0,0.0,0\n\
             C,135.3,35.4,1200,2018-01-01T00:00:00Z,-4.25,7.5,270\n"
        );
        let rows = parse_stations_csv(&text).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].altitude, 1200.0);
        assert_eq!(rows[0].wind_dir, Some(90.0));
    }

    #[test]
    fn empty_direction_masks_wind_only() {
        let text = format!("{HEADER}A,135.1,35.2,10,t0,5.5,3.0,\n");
        let rows = parse_stations_csv(&text).unwrap();
        assert_eq!(rows[0].wind_dir, None);
        let (_, valid) = rows[0].channels();
        assert_eq!(valid, [true, false, false]);
    }

    #[test]
    fn direction_360_wraps_to_zero() {
        let text = format!("{HEADER}A,135.1,35.2,10,t0,5.5,3.0,360.0\n");
        assert_eq!(parse_stations_csv(&text).unwrap()[0].wind_dir, Some(0.0));
    }

    #[test]
    fn columns_may_be_reordered() {
        let text = "lat,lon,station_id,altitude_m,time_iso8601,wind_dir_deg,wind_ms,temp_c\n35,135,X,1,t,10,2,3\n";
        let rows = parse_stations_csv(text).unwrap();
        assert_eq!((rows[0].lon, rows[0].lat, rows[0].temperature), (135.0, 35.0, Some(3.0)));
    }

    #[test]
    fn malformed_number_reports_line_and_column() {
        let text = format!("{HEADER}A,135.1,35.2,10,t0,5.5,3.0,90\nB,abc,35.2,10,t0,5.5,3.0,90\n");
        match parse_stations_csv(&text).unwrap_err() {
            Error::Format(FormatError::MalformedNumber { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "lon");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn render_parse_round_trip() {
        let text = format!("{HEADER}A,135.123456789,35.2,10,t0,,3.0,359.5\n");
        let rows = parse_stations_csv(&text).unwrap();
        assert_eq!(parse_stations_csv(&render_stations_csv(&rows)).unwrap(), rows);
    }
}
