use ctxedit::checkpoint::Checkpoint;
use ctxedit::model::Pipeline;
use ctxedit::numerics::tape::Tape;
use ctxedit::world::load_split;

#[test]
fn logits_diag() {
    let pipe = Pipeline::from_checkpoint(&Checkpoint::load("/tmp/probe_h.ckpt".as_ref()).unwrap()).unwrap();
    let eps = load_split("/tmp/full_ds".as_ref(), "val").unwrap();
    for ep in eps.iter().take(6) {
        let toks = pipe.encoders.vision.encode(&ep.scene.image);
        let mut tape = Tape::new();
        let mut hv = pipe.head.bind(&mut tape);
        let out = pipe.head.forward(&mut tape, &mut hv, &toks, &ep.prompt_tokens(), true).unwrap();
        let logits = tape.data(out.class_logits);
        let gt = ep.applicability();
        println!("episode k={} gt={:?}", out.n, gt);
        for i in 0..out.n {
            println!("   inst {i}: logits=({:+.3}, {:+.3}) margin={:+.4}", logits[2*i], logits[2*i+1], logits[2*i] - logits[2*i+1]);
        }
    }
}
