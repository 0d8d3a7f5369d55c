use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const JURA_TRAIN_FILE: &str = "prediction.csv";
pub const JURA_TEST_FILE: &str = "validation.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x P` inputs.
    pub x: DMatrix<f64>,
    /// `N x D` targets.
    pub y: DMatrix<f64>,
    pub task_names: Vec<String>,
    pub input_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, task_names: Vec<String>, input_names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::dims("dataset rows", x.nrows(), y.nrows()));
        }
        if x.nrows() < 2 {
            return Err(Error::InvalidParameter(format!("dataset needs at least 2 rows, got {}", x.nrows())));
        }
        if task_names.len() != y.ncols() {
            return Err(Error::dims("task names", y.ncols(), task_names.len()));
        }
        if input_names.len() != x.ncols() {
            return Err(Error::dims("input names", x.ncols(), input_names.len()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            x,
            y,
            task_names,
            input_names,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn task_count(&self) -> usize {
        self.y.ncols()
    }

    /// Keeps the named tasks, in the given order.
    pub fn select_tasks<S: AsRef<str>>(&self, names: &[S]) -> Result<Dataset> {
        let cols = names
            .iter()
            .map(|n| {
                self.task_names
                    .iter()
                    .position(|t| t == n.as_ref())
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown task `{}`", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            x: self.x.clone(),
            y: self.y.select_columns(cols.iter()),
            task_names: cols.iter().map(|&c| self.task_names[c].clone()).collect(),
            input_names: self.input_names.clone(),
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows.iter()),
            y: self.y.select_rows(rows.iter()),
            task_names: self.task_names.clone(),
            input_names: self.input_names.clone(),
        }
    }
}

/// Training and test sets of the Jura benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct JuraData {
    pub train: Dataset,
    pub test: Dataset,
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_string(),
            column: name.to_string(),
        })
}

/// Reads a headed CSV file.
///
/// Inputs are the `inputs` columns when given, else `Xloc`/`Yloc` when both
/// exist, else the first two columns. Targets are the `targets` columns, or
/// every non-input column when `targets` is empty. Only the selected columns
/// need to be numeric.
pub fn load_csv<S: AsRef<str>>(path: &Path, targets: &[S], inputs: Option<&[S]>) -> Result<Dataset> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: shown.clone(),
                source,
            },
            other => Error::InvalidParameter(format!("{shown}: {other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidParameter(format!("{shown}: bad header: {e}")))?
        .clone();
    let input_cols: Vec<usize> = match inputs {
        Some(names) => names
            .iter()
            .map(|n| column_index(&headers, n.as_ref(), &shown))
            .collect::<Result<_>>()?,
        None => match (column_index(&headers, "Xloc", &shown), column_index(&headers, "Yloc", &shown)) {
            (Ok(a), Ok(b)) => vec![a, b],
            _ if headers.len() >= 2 => vec![0, 1],
            _ => {
                return Err(Error::MissingColumn {
                    path: shown,
                    column: "Xloc".into(),
                })
            }
        },
    };
    let target_cols: Vec<usize> = if targets.is_empty() {
        (0..headers.len()).filter(|c| !input_cols.contains(c)).collect()
    } else {
        targets
            .iter()
            .map(|n| column_index(&headers, n.as_ref(), &shown))
            .collect::<Result<_>>()?
    };

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse {
                path: shown.clone(),
                line,
                column: String::new(),
                message: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                path: shown.clone(),
                line,
                column: headers[c].to_string(),
                message: format!("not a finite number: `{raw}`"),
            })
        };
        for &c in &input_cols {
            xs.push(parse(c)?);
        }
        for &c in &target_cols {
            ys.push(parse(c)?);
        }
    }
    let n = xs.len() / input_cols.len().max(1);
    Dataset::new(
        DMatrix::from_row_slice(n, input_cols.len(), &xs),
        DMatrix::from_row_slice(n, target_cols.len(), &ys),
        target_cols.iter().map(|&c| headers[c].to_string()).collect(),
        input_cols.iter().map(|&c| headers[c].to_string()).collect(),
    )
}

/// Loads `prediction.csv` (training) and `validation.csv` (test) from `dir`.
pub fn load_jura<S: AsRef<str>>(dir: &Path, targets: &[S]) -> Result<JuraData> {
    Ok(JuraData {
        train: load_csv(&dir.join(JURA_TRAIN_FILE), targets, None)?,
        test: load_csv(&dir.join(JURA_TEST_FILE), targets, None)?,
    })
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidParameter(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let header: Vec<&str> = dataset
        .input_names
        .iter()
        .chain(&dataset.task_names)
        .map(String::as_str)
        .collect();
    w.write_record(&header).map_err(io)?;
    for i in 0..dataset.len() {
        let row: Vec<String> = dataset
            .x
            .row(i)
            .iter()
            .chain(dataset.y.row(i).iter())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const JURA_LIKE: &str = "Xloc,Yloc,Landuse,Rock,Cd,Co,Ni,Zn\n\
        2.386,3.077,3,3,1.74,9.32,18.6,92.6\n\
        2.544,1.972,2,2,1.335,10,27.44,73.56\n\
        2.807,3.347,2,3,1.61,10.6,28.16,88\n";

    #[test]
    fn loads_selected_columns() {
        let f = file(JURA_LIKE);
        let d = load_csv(f.path(), &["Cd", "Zn"], None).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.input_names, vec!["Xloc", "Yloc"]);
        assert_eq!(d.task_names, vec!["Cd", "Zn"]);
        assert_eq!(d.y[(1, 1)], 73.56);
        assert_eq!(d.x[(2, 0)], 2.807);
        let cd = load_csv(f.path(), &["Cd"], None).unwrap();
        assert_eq!(cd.task_count(), 1);
    }

    #[test]
    fn reports_bad_cells_with_line_and_column() {
        let f = file("Xloc,Yloc,Cd\n1,2,0.5\n1,3,abc\n");
        match load_csv(f.path(), &["Cd"], None).unwrap_err() {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "Cd");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_column_and_file() {
        let f = file("Xloc,Yloc,Cd\n1,2,0.5\n1,3,0.7\n");
        assert!(matches!(load_csv(f.path(), &["Pb"], None), Err(Error::MissingColumn { .. })));
        assert!(matches!(
            load_csv(Path::new("/nonexistent/x.csv"), &["Cd"], None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn positional_inputs_and_round_trip() {
        let f = file("a,b,t1,t2\n0,1,2,3\n4,5,6,7\n");
        let d = load_csv::<&str>(f.path(), &[], None).unwrap();
        assert_eq!(d.input_names, vec!["a", "b"]);
        assert_eq!(d.task_names, vec!["t1", "t2"]);
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&d, out.path()).unwrap();
        assert_eq!(load_csv::<&str>(out.path(), &[], None).unwrap(), d);
    }

    #[test]
    fn select_tasks_by_name() {
        let f = file(JURA_LIKE);
        let d = load_csv(f.path(), &["Cd", "Ni", "Zn"], None).unwrap();
        let s = d.select_tasks(&["Zn", "Cd"]).unwrap();
        assert_eq!(s.y.column(0), d.y.column(2));
        assert!(d.select_tasks(&["Pb"]).is_err());
    }
}
