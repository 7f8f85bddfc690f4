use super::attention::{attention_backward, attention_forward, AttnDims, AttnInputs, MaskKind};
use super::kernels::{gelu, gelu_grad, layernorm, layernorm_backward, linear, linear_backward, log_softmax, LnCache, Real};
use super::{ArchConfig, AttnSlots, Batch, LayerSlots, Layout, LnSlots, MlpSlots, Slot};
use crate::error::{Error, Result};
use crate::textenc::{TokenId, PAD};

/// Borrowed view of a parameter buffer in scalar type `T`.
pub struct Net<'a, T> {
    arch: &'a ArchConfig,
    layout: &'a Layout,
    w: &'a [T],
}

struct AttnCache<T> {
    ln: LnCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    o: Vec<T>,
}

struct MlpCache<T> {
    ln: LnCache<T>,
    a: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

struct LayerCache<T> {
    self_attn: AttnCache<T>,
    cross: Option<AttnCache<T>>,
    mlp: MlpCache<T>,
}

/// Shape and masking of one stack of layers over `[batch*len, d]` rows.
struct StackCtx<'b> {
    batch: usize,
    len: usize,
    kind: MaskKind,
    valid: &'b [bool],
}

/// Encoder memory seen by cross-attention.
struct Memory<'b, T> {
    out: &'b [T],
    len: usize,
    batch: usize,
    valid: &'b [bool],
    kv_map: &'b [usize],
}

struct EncState<T> {
    ids: Vec<TokenId>,
    valid: Vec<bool>,
    batch: usize,
    len: usize,
    layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    out: Vec<T>,
}

/// Forward result with everything needed for the backward pass.
pub struct ForwardOut<T> {
    pub logits: Vec<T>,
    batch: usize,
    dec_len: usize,
    enc: Option<EncState<T>>,
    /// Token ids and position ids of the decoder stack input rows.
    stack_ids: Vec<TokenId>,
    stack_pos: Vec<usize>,
    stack_len: usize,
    stack_valid: Vec<bool>,
    /// Rows of the stack output that produce logits (all rows for the
    /// encoder-decoder; the target suffix for the decoder-only variant).
    out_rows: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    final_a: Vec<T>,
}

fn two_mut<T>(g: &mut [T], a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    assert!(a.offset + a.len <= b.offset || b.offset + b.len <= a.offset, "overlapping slots");
    if a.offset < b.offset {
        let (lo, hi) = g.split_at_mut(b.offset);
        (&mut lo[a.range()], &mut hi[..b.len])
    } else {
        let (lo, hi) = g.split_at_mut(a.offset);
        (&mut hi[..a.len], &mut lo[b.range()])
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(arch: &'a ArchConfig, layout: &'a Layout, w: &'a [T]) -> Self {
        assert_eq!(w.len(), layout.total, "parameter buffer does not match layout");
        Self { arch, layout, w }
    }

    pub fn arch(&self) -> &ArchConfig {
        self.arch
    }

    fn p(&self, s: Slot) -> &'a [T] {
        &self.w[s.range()]
    }

    fn d(&self) -> usize {
        self.arch.embed_dim
    }

    fn width(&self) -> usize {
        self.arch.heads * self.arch.head_dim
    }

    fn check_ids(&self, seqs: &[Vec<TokenId>], what: &str) -> Result<()> {
        let v = self.arch.vocab_size as TokenId;
        for (i, s) in seqs.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&id| id >= v) {
                return Err(Error::Input(format!(
                    "{what} sequence {i}: token id {bad} outside vocabulary of {v}"
                )));
            }
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], pos: &[usize], pos_slot: Slot) -> Vec<T> {
        let d = self.d();
        let tok = self.p(self.layout.tok_emb);
        let pe = self.p(pos_slot);
        let mut x = vec![T::zero(); ids.len() * d];
        for (r, (&id, &p)) in ids.iter().zip(pos).enumerate() {
            let row = &mut x[r * d..(r + 1) * d];
            let t = &tok[id as usize * d..(id as usize + 1) * d];
            let q = &pe[p * d..(p + 1) * d];
            for i in 0..d {
                row[i] = t[i] + q[i];
            }
        }
        x
    }

    fn embed_backward(&self, ids: &[TokenId], pos: &[usize], pos_slot: Slot, dx: &[T], grads: &mut [T]) {
        let d = self.d();
        let (gt, gp) = two_mut(grads, self.layout.tok_emb, pos_slot);
        for (r, (&id, &p)) in ids.iter().zip(pos).enumerate() {
            let g = &dx[r * d..(r + 1) * d];
            add_into(&mut gt[id as usize * d..(id as usize + 1) * d], g);
            add_into(&mut gp[p * d..(p + 1) * d], g);
        }
    }

    fn attn_fwd(
        &self,
        x: &[T],
        ctx: &StackCtx<'_>,
        ln: LnSlots,
        s: AttnSlots,
        mem: Option<&Memory<'_, T>>,
    ) -> (Vec<T>, AttnCache<T>) {
        let (d, w) = (self.d(), self.width());
        let rows = ctx.batch * ctx.len;
        let (a, lnc) = layernorm(x, d, self.p(ln.gain), self.p(ln.bias));
        let q = linear(&a, rows, self.p(s.wq), None, d, w);
        let identity: Vec<usize>;
        let (k, v, inputs_kv_map, valid, kind, lk) = match mem {
            Some(m) => {
                let mrows = m.batch * m.len;
                (
                    linear(m.out, mrows, self.p(s.wk), None, d, w),
                    linear(m.out, mrows, self.p(s.wv), None, d, w),
                    m.kv_map,
                    m.valid,
                    MaskKind::Full,
                    m.len,
                )
            }
            None => {
                identity = (0..ctx.batch).collect();
                (
                    linear(&a, rows, self.p(s.wk), None, d, w),
                    linear(&a, rows, self.p(s.wv), None, d, w),
                    identity.as_slice(),
                    ctx.valid,
                    ctx.kind,
                    ctx.len,
                )
            }
        };
        let inp = AttnInputs {
            q: &q,
            k: &k,
            v: &v,
            kv_map: inputs_kv_map,
            key_valid: valid,
            kind,
            dims: AttnDims { heads: self.arch.heads, head_dim: self.arch.head_dim, lq: ctx.len, lk },
        };
        let (o, p) = attention_forward(&inp);
        let y = linear(&o, rows, self.p(s.wo), None, w, d);
        (y, AttnCache { ln: lnc, a, q, k, v, p, o })
    }

    /// Returns the gradient w.r.t. the block input (excluding the residual
    /// path, which the caller keeps).
    #[allow(clippy::too_many_arguments)]
    fn attn_bwd(
        &self,
        dy: &[T],
        c: &AttnCache<T>,
        ctx: &StackCtx<'_>,
        ln: LnSlots,
        s: AttnSlots,
        mem: Option<(&Memory<'_, T>, &mut [T])>,
        grads: &mut [T],
    ) -> Vec<T> {
        let (d, w) = (self.d(), self.width());
        let rows = ctx.batch * ctx.len;
        let d_o = linear_backward(&c.o, dy, rows, self.p(s.wo), &mut grads[s.wo.range()], None, w, d, true)
            .expect("dx requested");
        let identity: Vec<usize> = (0..ctx.batch).collect();
        let (kv_map, valid, kind, lk, kv_batch) = match &mem {
            Some((m, _)) => (m.kv_map, m.valid, MaskKind::Full, m.len, m.batch),
            None => (identity.as_slice(), ctx.valid, ctx.kind, ctx.len, ctx.batch),
        };
        let inp = AttnInputs {
            q: &c.q,
            k: &c.k,
            v: &c.v,
            kv_map,
            key_valid: valid,
            kind,
            dims: AttnDims { heads: self.arch.heads, head_dim: self.arch.head_dim, lq: ctx.len, lk },
        };
        let (dq, dk, dv) = attention_backward(&inp, &c.p, &d_o, kv_batch);
        let mut da = linear_backward(&c.a, &dq, rows, self.p(s.wq), &mut grads[s.wq.range()], None, d, w, true)
            .expect("dx requested");
        match mem {
            Some((m, dmem)) => {
                let mrows = m.batch * m.len;
                let gk = linear_backward(m.out, &dk, mrows, self.p(s.wk), &mut grads[s.wk.range()], None, d, w, true);
                let gv = linear_backward(m.out, &dv, mrows, self.p(s.wv), &mut grads[s.wv.range()], None, d, w, true);
                add_into(dmem, &gk.expect("dx requested"));
                add_into(dmem, &gv.expect("dx requested"));
            }
            None => {
                let gk = linear_backward(&c.a, &dk, rows, self.p(s.wk), &mut grads[s.wk.range()], None, d, w, true);
                let gv = linear_backward(&c.a, &dv, rows, self.p(s.wv), &mut grads[s.wv.range()], None, d, w, true);
                add_into(&mut da, &gk.expect("dx requested"));
                add_into(&mut da, &gv.expect("dx requested"));
            }
        }
        let (dg, db) = two_mut(grads, ln.gain, ln.bias);
        layernorm_backward(&da, d, &c.ln, self.p(ln.gain), dg, db)
    }

    fn mlp_fwd(&self, x: &[T], rows: usize, ln: LnSlots, s: MlpSlots) -> (Vec<T>, MlpCache<T>) {
        let (d, m) = (self.d(), self.arch.mlp_dim);
        let (a, lnc) = layernorm(x, d, self.p(ln.gain), self.p(ln.bias));
        let pre = linear(&a, rows, self.p(s.w1), Some(self.p(s.b1)), d, m);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let y = linear(&act, rows, self.p(s.w2), Some(self.p(s.b2)), m, d);
        (y, MlpCache { ln: lnc, a, pre, act })
    }

    fn mlp_bwd(&self, dy: &[T], c: &MlpCache<T>, rows: usize, ln: LnSlots, s: MlpSlots, grads: &mut [T]) -> Vec<T> {
        let (d, m) = (self.d(), self.arch.mlp_dim);
        let (gw2, gb2) = two_mut(grads, s.w2, s.b2);
        let mut dact = linear_backward(&c.act, dy, rows, self.p(s.w2), gw2, Some(gb2), m, d, true)
            .expect("dx requested");
        for (g, &x) in dact.iter_mut().zip(&c.pre) {
            *g *= gelu_grad(x);
        }
        let (gw1, gb1) = two_mut(grads, s.w1, s.b1);
        let da = linear_backward(&c.a, &dact, rows, self.p(s.w1), gw1, Some(gb1), d, m, true)
            .expect("dx requested");
        let (dg, db) = two_mut(grads, ln.gain, ln.bias);
        layernorm_backward(&da, d, &c.ln, self.p(ln.gain), dg, db)
    }

    fn layer_fwd(
        &self,
        x: &mut [T],
        ctx: &StackCtx<'_>,
        l: &LayerSlots,
        mem: Option<&Memory<'_, T>>,
    ) -> LayerCache<T> {
        let rows = ctx.batch * ctx.len;
        let (y, self_attn) = self.attn_fwd(x, ctx, l.ln_self, l.self_attn, None);
        add_into(x, &y);
        let cross = match (l.cross, mem) {
            (Some((ln, s)), Some(m)) => {
                let (y, c) = self.attn_fwd(x, ctx, ln, s, Some(m));
                add_into(x, &y);
                Some(c)
            }
            _ => None,
        };
        let (y, mlp) = self.mlp_fwd(x, rows, l.ln_mlp, l.mlp);
        add_into(x, &y);
        LayerCache { self_attn, cross, mlp }
    }

    /// `dx` holds the gradient w.r.t. the layer output on entry and the
    /// gradient w.r.t. the layer input on exit.
    fn layer_bwd(
        &self,
        dx: &mut [T],
        c: &LayerCache<T>,
        ctx: &StackCtx<'_>,
        l: &LayerSlots,
        mem: Option<(&Memory<'_, T>, &mut [T])>,
        grads: &mut [T],
    ) {
        let rows = ctx.batch * ctx.len;
        let g = self.mlp_bwd(dx, &c.mlp, rows, l.ln_mlp, l.mlp, grads);
        add_into(dx, &g);
        if let (Some((ln, s)), Some(cc), Some(mem)) = (l.cross, c.cross.as_ref(), mem) {
            let g = self.attn_bwd(dx, cc, ctx, ln, s, Some(mem), grads);
            add_into(dx, &g);
        }
        let g = self.attn_bwd(dx, &c.self_attn, ctx, l.ln_self, l.self_attn, None, grads);
        add_into(dx, &g);
    }

    fn encode(&self, enc: &[Vec<TokenId>]) -> Result<EncState<T>> {
        let batch = enc.len();
        let len = enc.iter().map(Vec::len).max().unwrap_or(0);
        if len > self.arch.max_encoder_len {
            return Err(Error::Input(format!(
                "encoder input of length {len} exceeds max_encoder_len {}",
                self.arch.max_encoder_len
            )));
        }
        let mut ids = vec![PAD; batch * len];
        for (b, s) in enc.iter().enumerate() {
            ids[b * len..b * len + s.len()].copy_from_slice(s);
        }
        let valid: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        let pos: Vec<usize> = (0..batch * len).map(|r| r % len.max(1)).collect();
        let pos_slot = self.layout.enc_pos.expect("encoder present");
        let mut x = self.embed(&ids, &pos, pos_slot);
        let ctx = StackCtx { batch, len, kind: MaskKind::Full, valid: &valid };
        let layers = self
            .layout
            .enc_layers
            .iter()
            .map(|l| self.layer_fwd(&mut x, &ctx, l, None))
            .collect();
        let ln = self.layout.enc_ln.expect("encoder present");
        let (out, final_ln) = layernorm(&x, self.d(), self.p(ln.gain), self.p(ln.bias));
        Ok(EncState { ids, valid, batch, len, layers, final_ln, out })
    }

    fn encode_backward(&self, st: &EncState<T>, dout: &[T], grads: &mut [T]) {
        let d = self.d();
        let ln = self.layout.enc_ln.expect("encoder present");
        let (dg, db) = two_mut(grads, ln.gain, ln.bias);
        let mut dx = layernorm_backward(dout, d, &st.final_ln, self.p(ln.gain), dg, db);
        let ctx = StackCtx { batch: st.batch, len: st.len, kind: MaskKind::Full, valid: &st.valid };
        for (l, c) in self.layout.enc_layers.iter().zip(&st.layers).rev() {
            self.layer_bwd(&mut dx, c, &ctx, l, None, grads);
        }
        let pos: Vec<usize> = (0..st.ids.len()).map(|r| r % st.len.max(1)).collect();
        self.embed_backward(&st.ids, &pos, self.layout.enc_pos.expect("encoder present"), &dx, grads);
    }

    /// Runs the decoder stack over explicit rows and projects `out_rows`
    /// to logits.
    #[allow(clippy::too_many_arguments)]
    fn decode_stack(
        &self,
        ids: Vec<TokenId>,
        pos: Vec<usize>,
        batch: usize,
        len: usize,
        valid: Vec<bool>,
        kind: MaskKind,
        out_rows: Vec<usize>,
        mem: Option<&Memory<'_, T>>,
    ) -> (Vec<T>, Vec<LayerCache<T>>, LnCache<T>, Vec<T>, (Vec<TokenId>, Vec<usize>, Vec<bool>, Vec<usize>)) {
        let d = self.d();
        let v = self.arch.vocab_size;
        let mut x = self.embed(&ids, &pos, self.layout.dec_pos);
        let ctx = StackCtx { batch, len, kind, valid: &valid };
        let layers: Vec<_> = self.layout.dec_layers.iter().map(|l| self.layer_fwd(&mut x, &ctx, l, mem)).collect();
        let mut sel = vec![T::zero(); out_rows.len() * d];
        for (i, &r) in out_rows.iter().enumerate() {
            sel[i * d..(i + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        }
        let ln = self.layout.dec_ln;
        let (a, final_ln) = layernorm(&sel, d, self.p(ln.gain), self.p(ln.bias));
        let logits = linear(&a, out_rows.len(), self.p(self.layout.out_w), Some(self.p(self.layout.out_b)), d, v);
        (logits, layers, final_ln, a, (ids, pos, valid, out_rows))
    }

    /// Batched forward. Decoder sequences must share one length.
    pub fn forward(&self, enc: &[Vec<TokenId>], dec: &[Vec<TokenId>]) -> Result<ForwardOut<T>> {
        if enc.len() != dec.len() {
            return Err(Error::Input(format!("{} encoder vs {} decoder sequences", enc.len(), dec.len())));
        }
        self.check_ids(enc, "encoder")?;
        self.check_ids(dec, "decoder")?;
        let batch = dec.len();
        let dec_len = dec.first().map_or(0, Vec::len);
        if dec.iter().any(|s| s.len() != dec_len) {
            return Err(Error::Input("decoder sequences in a batch must share one length".into()));
        }
        if dec_len > self.arch.max_decoder_len {
            return Err(Error::Input(format!(
                "decoder input of length {dec_len} exceeds max_decoder_len {}",
                self.arch.max_decoder_len
            )));
        }
        if self.arch.is_decoder_only() {
            return self.forward_decoder_only(enc, dec, dec_len);
        }
        let enc_state = self.encode(enc)?;
        let kv_map: Vec<usize> = (0..batch).collect();
        let ids: Vec<TokenId> = dec.concat();
        let pos: Vec<usize> = (0..batch * dec_len).map(|r| r % dec_len.max(1)).collect();
        let valid = vec![true; batch * dec_len];
        let out_rows: Vec<usize> = (0..batch * dec_len).collect();
        let mem = Memory {
            out: &enc_state.out,
            len: enc_state.len,
            batch: enc_state.batch,
            valid: &enc_state.valid,
            kv_map: &kv_map,
        };
        let (logits, layers, final_ln, final_a, (ids, pos, valid, out_rows)) =
            self.decode_stack(ids, pos, batch, dec_len, valid, MaskKind::Causal, out_rows, Some(&mem));
        Ok(ForwardOut {
            logits,
            batch,
            dec_len,
            enc: Some(enc_state),
            stack_ids: ids,
            stack_pos: pos,
            stack_len: dec_len,
            stack_valid: valid,
            out_rows,
            layers,
            final_ln,
            final_a,
        })
    }

    fn forward_decoder_only(&self, enc: &[Vec<TokenId>], dec: &[Vec<TokenId>], dec_len: usize) -> Result<ForwardOut<T>> {
        let batch = dec.len();
        let xlen = enc.iter().map(Vec::len).max().unwrap_or(0);
        if xlen > self.arch.max_encoder_len {
            return Err(Error::Input(format!(
                "input of length {xlen} exceeds max_encoder_len {}",
                self.arch.max_encoder_len
            )));
        }
        let len = xlen + dec_len;
        let mut ids = vec![PAD; batch * len];
        let mut pos = vec![0usize; batch * len];
        let mut out_rows = Vec::with_capacity(batch * dec_len);
        for b in 0..batch {
            let x = &enc[b];
            let base = b * len;
            ids[base..base + x.len()].copy_from_slice(x);
            for i in 0..xlen {
                pos[base + i] = i;
            }
            for t in 0..dec_len {
                ids[base + xlen + t] = dec[b][t];
                // targets continue directly after the real input length
                pos[base + xlen + t] = x.len() + t;
                out_rows.push(base + xlen + t);
            }
        }
        let valid: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        let (logits, layers, final_ln, final_a, (ids, pos, valid, out_rows)) =
            self.decode_stack(ids, pos, batch, len, valid, MaskKind::Prefix(xlen), out_rows, None);
        Ok(ForwardOut {
            logits,
            batch,
            dec_len,
            enc: None,
            stack_ids: ids,
            stack_pos: pos,
            stack_len: len,
            stack_valid: valid,
            out_rows,
            layers,
            final_ln,
            final_a,
        })
    }

    /// Parameter gradients given `dlogits` for the rows of `fwd.logits`.
    pub fn backward(&self, fwd: &ForwardOut<T>, dlogits: &[T]) -> Vec<T> {
        let d = self.d();
        let v = self.arch.vocab_size;
        let mut grads = vec![T::zero(); self.layout.total];
        let n_out = fwd.out_rows.len();
        let (gw, gb) = two_mut(&mut grads, self.layout.out_w, self.layout.out_b);
        let da = linear_backward(&fwd.final_a, dlogits, n_out, self.p(self.layout.out_w), gw, Some(gb), d, v, true)
            .expect("dx requested");
        let ln = self.layout.dec_ln;
        let (dg, db) = two_mut(&mut grads, ln.gain, ln.bias);
        let dsel = layernorm_backward(&da, d, &fwd.final_ln, self.p(ln.gain), dg, db);
        let mut dx = vec![T::zero(); fwd.stack_ids.len() * d];
        for (i, &r) in fwd.out_rows.iter().enumerate() {
            add_into(&mut dx[r * d..(r + 1) * d], &dsel[i * d..(i + 1) * d]);
        }
        let kind = match &fwd.enc {
            Some(_) => MaskKind::Causal,
            None => MaskKind::Prefix(fwd.stack_len - fwd.dec_len),
        };
        let ctx = StackCtx { batch: fwd.batch, len: fwd.stack_len, kind, valid: &fwd.stack_valid };
        match &fwd.enc {
            Some(enc) => {
                let kv_map: Vec<usize> = (0..fwd.batch).collect();
                let mem = Memory { out: &enc.out, len: enc.len, batch: enc.batch, valid: &enc.valid, kv_map: &kv_map };
                let mut dmem = vec![T::zero(); enc.out.len()];
                for (l, c) in self.layout.dec_layers.iter().zip(&fwd.layers).rev() {
                    self.layer_bwd(&mut dx, c, &ctx, l, Some((&mem, &mut dmem)), &mut grads);
                }
                self.embed_backward(&fwd.stack_ids, &fwd.stack_pos, self.layout.dec_pos, &dx, &mut grads);
                self.encode_backward(enc, &dmem, &mut grads);
            }
            None => {
                for (l, c) in self.layout.dec_layers.iter().zip(&fwd.layers).rev() {
                    self.layer_bwd(&mut dx, c, &ctx, l, None, &mut grads);
                }
                self.embed_backward(&fwd.stack_ids, &fwd.stack_pos, self.layout.dec_pos, &dx, &mut grads);
            }
        }
        grads
    }

    /// Masked mean cross-entropy and its parameter gradient.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(T, Vec<T>)> {
        let fwd = self.forward(&batch.enc, &batch.dec_in)?;
        let targets: Vec<TokenId> = batch.targets.concat();
        let mask: Vec<bool> = batch.mask.concat();
        let (loss, dlogits) = masked_cross_entropy(&fwd.logits, self.arch.vocab_size, &targets, &mask)?;
        Ok((loss, self.backward(&fwd, &dlogits)))
    }

    /// Masked mean cross-entropy without gradients.
    pub fn batch_loss(&self, batch: &Batch) -> Result<T> {
        let fwd = self.forward(&batch.enc, &batch.dec_in)?;
        let targets: Vec<TokenId> = batch.targets.concat();
        let mask: Vec<bool> = batch.mask.concat();
        masked_cross_entropy(&fwd.logits, self.arch.vocab_size, &targets, &mask).map(|(l, _)| l)
    }

    /// Prepares incremental decoding for one input: the encoder runs once
    /// and later calls only run the decoder stack.
    pub fn session(&self, enc_ids: &[TokenId]) -> Result<DecoderSession<'_, 'a, T>> {
        self.check_ids(&[enc_ids.to_vec()], "encoder")?;
        let enc = if self.arch.is_decoder_only() {
            if enc_ids.len() > self.arch.max_encoder_len {
                return Err(Error::Input(format!(
                    "input of length {} exceeds max_encoder_len {}",
                    enc_ids.len(),
                    self.arch.max_encoder_len
                )));
            }
            None
        } else {
            Some(self.encode(&[enc_ids.to_vec()])?)
        };
        Ok(DecoderSession { net: self, enc_ids: enc_ids.to_vec(), enc })
    }
}

/// Encoder output cached for repeated decoder calls on one input.
pub struct DecoderSession<'n, 'a, T> {
    net: &'n Net<'a, T>,
    enc_ids: Vec<TokenId>,
    enc: Option<EncState<T>>,
}

impl<T: Real> DecoderSession<'_, '_, T> {
    /// Logits at the last position of each prefix (`[prefixes × vocab]`).
    /// Prefixes must share one length.
    pub fn next_logits(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<T>> {
        let net = self.net;
        let v = net.arch.vocab_size;
        let n = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len);
        if t == 0 || prefixes.iter().any(|p| p.len() != t) {
            return Err(Error::Input("prefixes must be non-empty and share one length".into()));
        }
        net.check_ids(prefixes, "decoder")?;
        let logits = match &self.enc {
            Some(enc) => {
                if t > net.arch.max_decoder_len {
                    return Err(Error::Input(format!("prefix length {t} exceeds max_decoder_len")));
                }
                let kv_map = vec![0usize; n];
                let mem = Memory { out: &enc.out, len: enc.len, batch: 1, valid: &enc.valid, kv_map: &kv_map };
                let ids = prefixes.concat();
                let pos: Vec<usize> = (0..n * t).map(|r| r % t).collect();
                let out_rows: Vec<usize> = (0..n).map(|b| b * t + t - 1).collect();
                net.decode_stack(ids, pos, n, t, vec![true; n * t], MaskKind::Causal, out_rows, Some(&mem)).0
            }
            None => {
                let enc: Vec<Vec<TokenId>> = vec![self.enc_ids.clone(); n];
                let fwd = net.forward(&enc, prefixes)?;
                let mut out = Vec::with_capacity(n * v);
                for b in 0..n {
                    let r = b * t + t - 1;
                    out.extend_from_slice(&fwd.logits[r * v..(r + 1) * v]);
                }
                out
            }
        };
        Ok(logits)
    }
}

/// Mean token cross-entropy over masked rows and `d loss / d logits`.
pub fn masked_cross_entropy<T: Real>(
    logits: &[T],
    vocab: usize,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<(T, Vec<T>)> {
    let n = targets.len();
    if logits.len() != n * vocab || mask.len() != n {
        return Err(Error::Input(format!(
            "logits/targets/mask shapes disagree: {} vs {}x{} vs {}",
            logits.len(),
            n,
            vocab,
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Input("loss mask selects no positions".into()));
    }
    let inv = T::one() / T::lit(count as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let t = targets[i] as usize;
        if t >= vocab {
            return Err(Error::Input(format!("target id {t} outside vocabulary")));
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let lp = log_softmax(row);
        total -= lp[t];
        let g = &mut grad[i * vocab..(i + 1) * vocab];
        for (gj, &l) in g.iter_mut().zip(&lp) {
            *gj = l.exp() * inv;
        }
        g[t] -= inv;
    }
    Ok((total * inv, grad))
}
