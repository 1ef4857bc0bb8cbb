//! Tag, histogram and scan file formats.
//!
//! TT4F layout, all little-endian:
//!
//! ```text
//! offset size field
//!      0    4 magic "TT4F"
//!      4    2 version (1)
//!      6    2 reserved (0)
//!      8    8 repetition period, ps
//!     16    8 record count
//!     24    9 per record: u8 channel (1..=4), u64 timestamp ps
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::coinc::FourfoldHistogram;
use crate::error::{Error, Result};
use crate::fitkit::DelayScanPoint;
use crate::tags::{TagRecord, TagStreams, N_CHANNELS};

pub const TT4F_MAGIC: [u8; 4] = *b"TT4F";
pub const TT4F_VERSION: u16 = 1;
pub const TT4F_HEADER_LEN: usize = 24;
pub const TT4F_RECORD_LEN: usize = 9;

pub const TAG_CSV_HEADER: [&str; 2] = ["channel", "timestamp_ps"];
pub const HIST_CSV_HEADER: [&str; 4] = ["n14", "n24", "n34", "count"];
pub const SCAN_CSV_HEADER: [&str; 3] = ["tau_ps", "cc", "acc"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tt4fHeader {
    pub version: u16,
    pub reserved: u16,
    pub period_ps: u64,
    pub record_count: u64,
}

impl Tt4fHeader {
    pub fn new(period_ps: u64, record_count: u64) -> Self {
        Self {
            version: TT4F_VERSION,
            reserved: 0,
            period_ps,
            record_count,
        }
    }

    fn to_bytes(self) -> [u8; TT4F_HEADER_LEN] {
        let mut b = [0u8; TT4F_HEADER_LEN];
        b[0..4].copy_from_slice(&TT4F_MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.reserved.to_le_bytes());
        b[8..16].copy_from_slice(&self.period_ps.to_le_bytes());
        b[16..24].copy_from_slice(&self.record_count.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8; TT4F_HEADER_LEN]) -> Result<Self> {
        if b[0..4] != TT4F_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &b[0..4])));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != TT4F_VERSION {
            return Err(Error::Format(format!("unsupported TT4F version {version}")));
        }
        Ok(Self {
            version,
            reserved: u16::from_le_bytes([b[6], b[7]]),
            period_ps: u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")),
            record_count: u64::from_le_bytes(b[16..24].try_into().expect("8 bytes")),
        })
    }
}

fn eof_as_format(e: io::Error, what: &str) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Format(format!("truncated {what}"))
    } else {
        Error::Io(e)
    }
}

pub fn write_tt4f<W: Write>(mut w: W, header: Tt4fHeader, records: &[TagRecord]) -> Result<()> {
    if header.record_count != records.len() as u64 {
        return Err(Error::Format(format!(
            "header declares {} records, {} given",
            header.record_count,
            records.len()
        )));
    }
    w.write_all(&header.to_bytes())?;
    let mut buf = [0u8; TT4F_RECORD_LEN];
    for r in records {
        buf[0] = r.channel;
        buf[1..].copy_from_slice(&r.timestamp_ps.to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole TT4F stream and validates channel range, per-channel
/// ordering and that the body holds exactly `record_count` records.
pub fn read_tt4f<R: Read>(mut r: R) -> Result<(Tt4fHeader, Vec<TagRecord>)> {
    let mut hb = [0u8; TT4F_HEADER_LEN];
    r.read_exact(&mut hb).map_err(|e| eof_as_format(e, "header"))?;
    let header = Tt4fHeader::from_bytes(&hb)?;

    let mut records = Vec::with_capacity(header.record_count.min(1 << 24) as usize);
    let mut last = [0u64; N_CHANNELS];
    let mut buf = [0u8; TT4F_RECORD_LEN];
    for i in 0..header.record_count {
        r.read_exact(&mut buf).map_err(|e| eof_as_format(e, "record body"))?;
        let channel = buf[0];
        if !(1..=N_CHANNELS as u8).contains(&channel) {
            return Err(Error::Format(format!("record {i}: channel {channel} out of range")));
        }
        let t = u64::from_le_bytes(buf[1..].try_into().expect("8 bytes"));
        let c = usize::from(channel - 1);
        if t < last[c] {
            return Err(Error::Format(format!("record {i}: channel {channel} goes backwards")));
        }
        last[c] = t;
        records.push(TagRecord::new(channel, t));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after declared records".into()));
    }
    Ok((header, records))
}

pub fn write_streams_tt4f<W: Write>(w: W, streams: &TagStreams) -> Result<()> {
    let records = streams.to_records();
    write_tt4f(w, Tt4fHeader::new(streams.period_ps, records.len() as u64), &records)
}

pub fn read_streams_tt4f<R: Read>(r: R) -> Result<TagStreams> {
    let (header, records) = read_tt4f(r)?;
    TagStreams::from_records(header.period_ps, records)
}

pub fn write_tags_csv<W: Write>(w: W, streams: &TagStreams) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TAG_CSV_HEADER)?;
    for r in streams.to_records() {
        wtr.write_record([r.channel.to_string(), r.timestamp_ps.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Format(format!(
            "expected CSV header {}, got {}",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::Format(format!("line {line}: missing column {i}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse `{raw}`")))
}

/// Reads `channel,timestamp_ps` rows; the period is not stored in CSV.
pub fn read_tags_csv<R: Read>(r: R, period_ps: u64) -> Result<TagStreams> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    check_header(&mut rdr, &TAG_CSV_HEADER)?;
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let line = i + 2;
        records.push(TagRecord::new(parse_field(&rec, 0, line)?, parse_field(&rec, 1, line)?));
    }
    let streams = TagStreams::from_records(period_ps, records)?;
    streams.check_sorted().map_err(|e| Error::Format(e.to_string()))?;
    Ok(streams)
}

pub fn write_histogram_csv<W: Write>(w: W, hist: &FourfoldHistogram) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(HIST_CSV_HEADER)?;
    for ((a, b, c), n) in hist.iter() {
        wtr.write_record([a.to_string(), b.to_string(), c.to_string(), n.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Plane bins written with the implied `n34 = n14 + n24` column.
pub fn write_plane_csv<W: Write>(w: W, plane: &BTreeMap<(i32, i32), u64>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(HIST_CSV_HEADER)?;
    for (&(a, b), n) in plane {
        wtr.write_record([a.to_string(), b.to_string(), (a + b).to_string(), n.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_histogram_csv<R: Read>(r: R, max_lag: u32) -> Result<FourfoldHistogram> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &HIST_CSV_HEADER)?;
    let mut bins = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let line = i + 2;
        bins.push((
            (
                parse_field(&rec, 0, line)?,
                parse_field(&rec, 1, line)?,
                parse_field(&rec, 2, line)?,
            ),
            parse_field(&rec, 3, line)?,
        ));
    }
    FourfoldHistogram::from_bins(max_lag, bins)
}

pub fn write_scan_csv<W: Write>(w: W, points: &[DelayScanPoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SCAN_CSV_HEADER)?;
    for p in points {
        wtr.write_record([p.tau_ps.to_string(), p.cc.to_string(), p.acc.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_scan_csv<R: Read>(r: R) -> Result<Vec<DelayScanPoint>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &SCAN_CSV_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let line = i + 2;
        let tau: f64 = parse_field(&rec, 0, line)?;
        let cc: f64 = parse_field(&rec, 1, line)?;
        let acc: f64 = parse_field(&rec, 2, line)?;
        if [tau, cc, acc].iter().any(|v| !v.is_finite()) || cc < 0.0 || acc < 0.0 {
            return Err(Error::Format(format!("line {line}: invalid scan row")));
        }
        out.push(DelayScanPoint::from_counts(tau, cc, acc));
    }
    Ok(out)
}

/// Loads tags by extension: `.csv` as CSV (using `period_ps`), anything
/// else as TT4F.
pub fn load_tags(path: &Path, csv_period_ps: u64) -> Result<TagStreams> {
    let file = BufReader::new(File::open(path)?);
    if is_csv(path) {
        read_tags_csv(file, csv_period_ps)
    } else {
        read_streams_tt4f(file)
    }
}

pub fn save_tags(path: &Path, streams: &TagStreams) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    if is_csv(path) {
        write_tags_csv(file, streams)
    } else {
        write_streams_tt4f(file, streams)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TagStreams {
        TagStreams::new(3125, [vec![0, 3125], vec![3125], vec![0, 7], vec![3125, 9000]])
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_streams_tt4f(&mut buf, &TagStreams::new(3125, [vec![], vec![], vec![], vec![258]])).unwrap();
        assert_eq!(buf.len(), TT4F_HEADER_LEN + TT4F_RECORD_LEN);
        assert_eq!(&buf[0..4], b"TT4F");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..16], &3125u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(buf[24], 4);
        assert_eq!(&buf[25..], &[2, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn corrupt_inputs() {
        let mut buf = Vec::new();
        write_streams_tt4f(&mut buf, &sample()).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tt4f(&bad[..]), Err(Error::Format(_))));

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_tt4f(&bad[..]), Err(Error::Format(_))));

        assert!(matches!(read_tt4f(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(read_tt4f(&buf[..10]), Err(Error::Format(_))));

        let mut bad = buf.clone();
        bad.push(0);
        assert!(matches!(read_tt4f(&bad[..]), Err(Error::Format(_))));

        let mut bad = buf.clone();
        bad[24] = 9;
        assert!(matches!(read_tt4f(&bad[..]), Err(Error::Format(_))));
    }

    #[test]
    fn backwards_channel_rejected() {
        let recs = [TagRecord::new(1, 10), TagRecord::new(1, 5)];
        let mut buf = Vec::new();
        write_tt4f(&mut buf, Tt4fHeader::new(10, 2), &recs).unwrap();
        assert!(matches!(read_tt4f(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn reserved_field_preserved() {
        let h = Tt4fHeader {
            reserved: 0xBEEF,
            ..Tt4fHeader::new(77, 0)
        };
        let mut buf = Vec::new();
        write_tt4f(&mut buf, h, &[]).unwrap();
        assert_eq!(read_tt4f(&buf[..]).unwrap().0, h);
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_tags_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("channel,timestamp_ps\n1,0\n3,0\n"));
        assert_eq!(read_tags_csv(&buf[..], 3125).unwrap(), sample());
    }

    #[test]
    fn csv_rejects_bad_rows() {
        assert!(read_tags_csv(&b"chan,ts\n1,0\n"[..], 1).is_err());
        assert!(read_tags_csv(&b"channel,timestamp_ps\n1,abc\n"[..], 1).is_err());
        assert!(read_tags_csv(&b"channel,timestamp_ps\n7,1\n"[..], 1).is_err());
        assert!(read_tags_csv(&b"channel,timestamp_ps\n1,5\n1,4\n"[..], 1).is_err());
        assert!(read_tags_csv(&b"channel,timestamp_ps\n"[..], 1).unwrap().is_empty());
    }

    #[test]
    fn histogram_csv_round_trip() {
        let h = FourfoldHistogram::from_bins(5, [((0, 0, 0), 5), ((-1, 0, -1), 2)]).unwrap();
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &h).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "n14,n24,n34,count\n-1,0,-1,2\n0,0,0,5\n"
        );
        let back = read_histogram_csv(&buf[..], 5).unwrap();
        assert_eq!(back.iter().collect::<Vec<_>>(), h.iter().collect::<Vec<_>>());
    }

    #[test]
    fn scan_csv() {
        let pts = vec![DelayScanPoint::from_counts(-2.5, 10.0, 4.25)];
        let mut buf = Vec::new();
        write_scan_csv(&mut buf, &pts).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "tau_ps,cc,acc\n-2.5,10,4.25\n");
        assert_eq!(read_scan_csv(&buf[..]).unwrap(), pts);
        assert!(read_scan_csv(&b"tau_ps,cc,acc\n1,x,2\n"[..]).is_err());
        assert!(read_scan_csv(&b"tau_ps,cc,acc\n1,-1,2\n"[..]).is_err());
        assert!(read_scan_csv(&b"tau,cc\n1,2\n"[..]).is_err());
    }

    fn arb_streams() -> impl Strategy<Value = TagStreams> {
        (
            1u64..10_000,
            prop::array::uniform4(prop::collection::vec(any::<u64>(), 0..40)),
        )
            .prop_map(|(period, mut ch)| {
                for s in &mut ch {
                    s.sort_unstable();
                }
                TagStreams::new(period, ch)
            })
    }

    proptest! {
        #[test]
        fn tt4f_round_trip_is_bit_exact(s in arb_streams(), reserved in any::<u16>()) {
            let recs = s.to_records();
            let header = Tt4fHeader { reserved, ..Tt4fHeader::new(s.period_ps, recs.len() as u64) };
            let mut buf = Vec::new();
            write_tt4f(&mut buf, header, &recs).unwrap();
            let (h2, r2) = read_tt4f(&buf[..]).unwrap();
            prop_assert_eq!(h2, header);
            prop_assert_eq!(&r2, &recs);
            let mut again = Vec::new();
            write_tt4f(&mut again, h2, &r2).unwrap();
            prop_assert_eq!(again, buf);
            prop_assert_eq!(TagStreams::from_records(h2.period_ps, r2).unwrap(), s);
        }

        #[test]
        fn csv_and_tt4f_decode_identically(s in arb_streams()) {
            let mut bin = Vec::new();
            write_streams_tt4f(&mut bin, &s).unwrap();
            let mut text = Vec::new();
            write_tags_csv(&mut text, &s).unwrap();
            prop_assert_eq!(read_streams_tt4f(&bin[..]).unwrap(), read_tags_csv(&text[..], s.period_ps).unwrap());
        }
    }
}
