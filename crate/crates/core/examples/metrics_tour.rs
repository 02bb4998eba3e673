//! The scalar measures on small hand-made inputs.

use tcas_lab::attn::{AttentionRecord, EventSpan, HeadId, TokenLayout};
use tcas_lab::metrics::{
    consistency_product, discriminability_ratio, eoj_consistency, iou, kl_discriminability, pearson_test, recall_at,
    ConsistencyScores, Interval,
};

fn main() -> tcas_lab::Result<()> {
    let pred = Interval::new(2.0, 8.0)?;
    let gold = Interval::new(4.0, 10.0)?;
    println!("iou {:.3}", iou(pred, gold));
    println!("R@0.5 {:.2}", recall_at(&[0.6, 0.4, 0.8], 0.5)?);
    println!("c = {:.3}", consistency_product(0.451, 0.639));
    println!("{:?}", ConsistencyScores::from_ious(0.9, 0.8, 0.4));

    // four frames, then an untagged token and two tokens describing event 0
    let layout = TokenLayout::video_then_text(4, &[None, Some(0), Some(0)])?;
    let rows = vec![
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.2, 0.3, 0.5, 0.0, 0.0, 0.0, 0.0],
        vec![0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0],
        vec![0.2, 0.2, 0.2, 0.2, 0.2, 0.0, 0.0],
        vec![0.3, 0.3, 0.2, 0.2, 0.0, 0.0, 0.0],
        vec![0.1, 0.1, 0.4, 0.4, 0.0, 0.0, 0.0],
    ];
    let rec = AttentionRecord::from_rows(HeadId::new(0, 0), &rows)?;
    let span = EventSpan::new(0, 0, 1)?;
    println!("discriminability {:?}", discriminability_ratio(&rec, &layout, &span)?);

    let layout2 = TokenLayout::video_then_text(4, &[None, Some(0), Some(1)])?;
    println!("symmetric KL between events {:.4}", kl_discriminability(&rec, &layout2, 0, 1)?);
    println!("eoj consistency {}", eoj_consistency(&[1.0, 1.0, 0.0, 1.0])?);
    println!("{:?}", pearson_test(&[0.1, 0.4, 0.35, 0.8, 0.6], &[0.2, 0.3, 0.5, 0.9, 0.5])?);
    Ok(())
}
