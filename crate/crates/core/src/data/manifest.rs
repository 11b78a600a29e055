use std::collections::BTreeMap;

/// Line-delimited key-value text.
///
/// Header lines are `key=value`. Record lines start with `-` and hold
/// tab-separated `key=value` fields. Values may not contain tabs or newlines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    header: BTreeMap<String, String>,
    records: Vec<BTreeMap<String, String>>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.header.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    pub fn push_record(&mut self, fields: Vec<(&str, String)>) {
        self.records
            .push(fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect());
    }

    pub fn records(&self) -> &[BTreeMap<String, String>] {
        &self.records
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            out.push_str(&format!("{k}={}\n", clean(v)));
        }
        for r in &self.records {
            let fields: Vec<String> = r.iter().map(|(k, v)| format!("{k}={}", clean(v))).collect();
            out.push_str(&format!("-\t{}\n", fields.join("\t")));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("-\t") {
                let mut record = BTreeMap::new();
                for field in rest.split('\t') {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| format!("line {}: field `{field}` lacks `=`", n + 1))?;
                    record.insert(k.to_string(), v.to_string());
                }
                m.records.push(record);
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
                m.header.insert(k.to_string(), v.to_string());
            }
        }
        Ok(m)
    }
}

fn clean(v: &str) -> String {
    v.replace(['\t', '\n', '\r'], " ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut m = Manifest::default();
        m.set("seed", "7");
        m.set("path", "a b=c");
        m.push_record(vec![("index", "0".into()), ("origin", "dir/x y.png".into())]);
        m.push_record(vec![("index", "1".into()), ("label", "".into())]);
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("path"), Some("a b=c"));
    }
}
