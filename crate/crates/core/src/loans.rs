//! Loan records and their on-disk formats.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LoanError {
    #[error("loan csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("loan {loan}: {reason}")]
    Invalid { loan: String, reason: String },
    #[error("missing column {0}")]
    MissingColumn(String),
}

/// Names of the structured columns, split by kind.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredSchema {
    pub continuous: Vec<String>,
    pub categorical: Vec<String>,
}

impl StructuredSchema {
    pub fn columns(&self) -> impl Iterator<Item = &str> {
        self.continuous.iter().chain(&self.categorical).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanRecord {
    pub loan_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub start_date: NaiveDate,
    pub term_months: u32,
    /// `None` marks a missing value.
    pub continuous: BTreeMap<String, Option<f64>>,
    pub categorical: BTreeMap<String, Option<String>>,
    pub text: Vec<String>,
    pub label: u8,
}

impl LoanRecord {
    pub fn validate(&self) -> Result<(), LoanError> {
        let fail = |reason: &str| Err(LoanError::Invalid { loan: self.loan_id.clone(), reason: reason.into() });
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude) {
            return fail("coordinates out of range");
        }
        if self.label > 1 {
            return fail("label must be 0 or 1");
        }
        if self.term_months < 1 {
            return fail("term must be at least one month");
        }
        Ok(())
    }
}

const FIXED: [&str; 6] = ["loan_id", "lat", "lon", "start_date", "term_months", "label"];

/// Reads the loan CSV; structured columns are interpreted through `schema`
/// and empty cells become missing values. Text is attached separately.
pub fn read_loans<R: Read>(reader: R, schema: &StructuredSchema) -> Result<Vec<LoanRecord>, LoanError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let pos: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| pos.get(name).copied().ok_or_else(|| LoanError::MissingColumn(name.to_string()));
    let fixed: Vec<usize> = FIXED.iter().map(|n| col(n)).collect::<Result<_, _>>()?;
    let cont: Vec<(String, usize)> =
        schema.continuous.iter().map(|n| Ok((n.clone(), col(n)?))).collect::<Result<_, LoanError>>()?;
    let cat: Vec<(String, usize)> =
        schema.categorical.iter().map(|n| Ok((n.clone(), col(n)?))).collect::<Result<_, LoanError>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let loan_id = rec[fixed[0]].to_string();
        let bad = |what: &str| LoanError::Invalid { loan: loan_id.clone(), reason: format!("cannot parse {what}") };
        let num = |i: usize, what: &str| rec[i].trim().parse::<f64>().map_err(|_| bad(what));
        let mut continuous = BTreeMap::new();
        for (name, i) in &cont {
            let v = rec[*i].trim();
            let parsed = if v.is_empty() { None } else { Some(v.parse::<f64>().map_err(|_| bad(name))?) };
            continuous.insert(name.clone(), parsed);
        }
        let categorical = cat
            .iter()
            .map(|(name, i)| {
                let v = rec[*i].trim();
                (name.clone(), (!v.is_empty()).then(|| v.to_string()))
            })
            .collect();
        let loan = LoanRecord {
            latitude: num(fixed[1], "lat")?,
            longitude: num(fixed[2], "lon")?,
            start_date: rec[fixed[3]].trim().parse().map_err(|_| bad("start_date"))?,
            term_months: rec[fixed[4]].trim().parse().map_err(|_| bad("term_months"))?,
            label: rec[fixed[5]].trim().parse().map_err(|_| bad("label"))?,
            continuous,
            categorical,
            text: Vec::new(),
            loan_id,
        };
        loan.validate()?;
        out.push(loan);
    }
    Ok(out)
}

pub fn write_loans<W: Write>(writer: W, loans: &[LoanRecord], schema: &StructuredSchema) -> Result<(), LoanError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FIXED.to_vec();
    header.extend(schema.columns());
    w.write_record(&header)?;
    for l in loans {
        let mut row = vec![
            l.loan_id.clone(),
            l.latitude.to_string(),
            l.longitude.to_string(),
            l.start_date.to_string(),
            l.term_months.to_string(),
            l.label.to_string(),
        ];
        for name in &schema.continuous {
            row.push(l.continuous.get(name).copied().flatten().map(|v| v.to_string()).unwrap_or_default());
        }
        for name in &schema.categorical {
            row.push(l.categorical.get(name).cloned().flatten().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `loan_id TAB tokens` lines.
pub fn read_texts<R: Read>(reader: R) -> Result<HashMap<String, Vec<String>>, LoanError> {
    let mut out = HashMap::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        out.insert(id.to_string(), text.split_whitespace().map(str::to_string).collect());
    }
    Ok(out)
}

pub fn write_texts<W: Write>(mut writer: W, loans: &[LoanRecord]) -> Result<(), LoanError> {
    for l in loans {
        writeln!(writer, "{}\t{}", l.loan_id, l.text.join(" "))?;
    }
    Ok(())
}

/// Attaches token lists to loans by id; loans without a text line keep an
/// empty list.
pub fn attach_texts(loans: &mut [LoanRecord], mut texts: HashMap<String, Vec<String>>) {
    for l in loans {
        if let Some(t) = texts.remove(&l.loan_id) {
            l.text = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> StructuredSchema {
        StructuredSchema { continuous: vec!["age".into()], categorical: vec!["sector".into()] }
    }

    fn loan(id: &str, age: Option<f64>, sector: Option<&str>) -> LoanRecord {
        LoanRecord {
            loan_id: id.into(),
            latitude: 30.5,
            longitude: 104.25,
            start_date: NaiveDate::from_ymd_opt(2021, 4, 9).unwrap(),
            term_months: 6,
            continuous: BTreeMap::from([("age".into(), age)]),
            categorical: BTreeMap::from([("sector".into(), sector.map(str::to_string))]),
            text: vec!["alpha".into(), "beta".into()],
            label: 1,
        }
    }

    #[test]
    fn csv_and_text_round_trip() {
        let loans = vec![loan("L1", Some(0.1), Some("farm")), loan("L2", None, None)];
        let mut csv_buf = Vec::new();
        write_loans(&mut csv_buf, &loans, &schema()).unwrap();
        let mut txt = Vec::new();
        write_texts(&mut txt, &loans).unwrap();
        let mut back = read_loans(csv_buf.as_slice(), &schema()).unwrap();
        attach_texts(&mut back, read_texts(txt.as_slice()).unwrap());
        assert_eq!(back, loans);
    }

    #[test]
    fn missing_schema_column_is_reported() {
        let text = "loan_id,lat,lon,start_date,term_months,label\nL1,1,1,2021-01-01,3,0\n";
        assert!(matches!(read_loans(text.as_bytes(), &schema()), Err(LoanError::MissingColumn(c)) if c == "age"));
    }

    #[test]
    fn invalid_label_rejected() {
        let text = "loan_id,lat,lon,start_date,term_months,label,age,sector\nL1,1,1,2021-01-01,3,2,,\n";
        assert!(matches!(read_loans(text.as_bytes(), &schema()), Err(LoanError::Invalid { .. })));
    }
}
