//! Exactly-once filtering with a timestamp vector, and how operator output
//! timestamps are derived from input timestamps.

use elastream::event::{Event, SourceId, Timestamp, TimestampVector};
use elastream::runtime::{output_timestamp, output_watermark};

fn main() {
    let a = SourceId(1);
    let b = SourceId(2);
    let mut tv = TimestampVector::new();

    let stream = [
        Event::data(a, Timestamp(10), b"k".to_vec(), b"first".to_vec()),
        Event::data(b, Timestamp(7), b"k".to_vec(), b"other source".to_vec()),
        Event::data(a, Timestamp(10), b"k".to_vec(), b"first".to_vec()),
        Event::data(a, Timestamp(9), b"k".to_vec(), b"stale".to_vec()),
        Event::data(a, Timestamp(12), b"k".to_vec(), b"second".to_vec()),
    ];
    for e in &stream {
        if tv.is_duplicate(e) {
            println!("drop   {} ts={}", e.source, e.ts);
        } else {
            tv.advance(e.source, e.ts);
            println!("apply  {} ts={}", e.source, e.ts);
        }
    }
    println!("tv = {:?}", tv.iter().collect::<Vec<_>>());

    let bits = 16;
    for seq in 0..3 {
        println!(
            "input ts 5, output #{seq} -> ts {}",
            output_timestamp(Timestamp(5), seq, bits)
        );
    }
    println!(
        "input low watermark 5 -> output watermark {}",
        output_watermark(Timestamp(5), bits)
    );
}
