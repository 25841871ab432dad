//! Forward passes for the three architectures.
//!
//! The recurrent cell is a standard single-layer LSTM:
//!
//! ```text
//! i_t = sigmoid(W_i x_t + U_i h_{t-1} + b_i)      input gate
//! f_t = sigmoid(W_f x_t + U_f h_{t-1} + b_f)      forget gate
//! g_t = tanh   (W_g x_t + U_g h_{t-1} + b_g)      candidate cell
//! o_t = sigmoid(W_o x_t + U_o h_{t-1} + b_o)      output gate
//! c_t = f_t * c_{t-1} + i_t * g_t
//! h_t = o_t * tanh(c_t)
//! ```
//!
//! Inputs are true variable-length sequences: padding positions are never
//! part of a forward pass, so pooling and attention see only real tokens.
//! The one exception is the conv architecture on inputs shorter than the
//! widest kernel, which are padded up to that width with the padding token.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{Arch, BoundModel, SeqInput};
use crate::data::PAD_INDEX;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::{Error, Result};

impl BoundModel<'_> {
    /// Class probabilities for one input. `dropout_rng` enables dropout on
    /// the fully connected layer input (training-mode forwards only);
    /// explanation passes always go through the dropout-free path.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        input: &SeqInput,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if input.is_empty() {
            return Err(Error::EmptyInput);
        }
        let config = &self.model().config;
        if let Some(&bad) = input.indices.iter().find(|&&ix| ix as usize >= config.vocab_size) {
            return Err(Error::Contract(format!(
                "token index {} out of vocabulary {}",
                bad, config.vocab_size
            )));
        }

        // Short inputs are padded up to the widest kernel so every width
        // has at least one window.
        let padded;
        let input = if config.arch == Arch::Conv && input.len() < config.max_conv_width() {
            let mut ind = input.indices.clone();
            let mut keep = input.keep.clone();
            while ind.len() < config.max_conv_width() {
                ind.push(PAD_INDEX);
                if let Some(k) = keep.as_mut() {
                    k.push(1.0);
                }
            }
            padded = SeqInput { indices: ind, keep };
            &padded
        } else {
            input
        };

        let table = self.id("embed");
        let mut emb = tape.embed(table, &input.indices);
        if let Some(keep) = &input.keep {
            let mask = tape.constant(Tensor::vector(keep.clone()));
            emb = tape.scale_rows(emb, mask);
        }

        let rep = match config.arch {
            Arch::Conv => self.conv_representation(tape, emb),
            Arch::Recurrent => {
                let hs = self.run_cell(tape, "lstm", emb, input.len(), false);
                let stacked = tape.stack_rows(&hs);
                tape.max_over_time(stacked)
            }
            Arch::SelfAttention => self.attention_representation(tape, emb, input.len()),
        };

        let rep = self.apply_dropout(tape, rep, dropout_rng);
        let logits_w = tape.matvec(self.id("head.weight"), rep);
        let logits = tape.add(logits_w, self.id("head.bias"));
        Ok(tape.softmax(logits))
    }

    fn conv_representation(&self, tape: &mut Tape, emb: NodeId) -> NodeId {
        let config = &self.model().config;
        let mut pooled = Vec::with_capacity(config.conv_widths.len());
        for &w in &config.conv_widths {
            let kernel = self.id(&format!("conv{}.kernel", w));
            let bias = self.id(&format!("conv{}.bias", w));
            let c = tape.conv1d(emb, kernel, w);
            let c = tape.add_row(c, bias);
            let c = tape.relu(c);
            pooled.push(tape.max_over_time(c));
        }
        tape.concat(&pooled)
    }

    fn attention_representation(&self, tape: &mut Tape, emb: NodeId, len: usize) -> NodeId {
        let fw = self.run_cell(tape, "fw", emb, len, false);
        let bw = self.run_cell(tape, "bw", emb, len, true);
        let joined: Vec<NodeId> = fw
            .iter()
            .zip(&bw)
            .map(|(&f, &b)| tape.concat(&[f, b]))
            .collect();
        let states = tape.stack_rows(&joined); // [len, 2H]

        let states_t = tape.transpose(states);
        let pre = tape.matmul(self.id("attn.w1"), states_t); // [H, len]
        let pre = tape.tanh(pre);
        let scores = tape.matmul(self.id("attn.w2"), pre); // [rows, len]
        let attention = tape.softmax(scores);
        let matrix = tape.matmul(attention, states); // [rows, 2H]
        tape.flatten(matrix)
    }

    /// Runs the gated cell over the embedded sequence, returning one hidden
    /// state per position in sequence order (the reverse direction is
    /// re-aligned).
    fn run_cell(
        &self,
        tape: &mut Tape,
        prefix: &str,
        emb: NodeId,
        len: usize,
        reverse: bool,
    ) -> Vec<NodeId> {
        let h = self.model().config.hidden_dim;
        let gate_ids: Vec<(NodeId, NodeId, NodeId)> = ["input", "forget", "cell", "output"]
            .iter()
            .map(|gate| {
                (
                    self.id(&format!("{}.w_{}", prefix, gate)),
                    self.id(&format!("{}.u_{}", prefix, gate)),
                    self.id(&format!("{}.b_{}", prefix, gate)),
                )
            })
            .collect();

        let mut hidden = tape.constant(Tensor::vector(vec![0.0; h]));
        let mut cell = tape.constant(Tensor::vector(vec![0.0; h]));
        let mut states = vec![0; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };

        for t in order {
            let x = tape.row(emb, t);
            let mut gates = Vec::with_capacity(4);
            for &(w, u, b) in &gate_ids {
                let wx = tape.matvec(w, x);
                let uh = tape.matvec(u, hidden);
                let s = tape.add(wx, uh);
                gates.push(tape.add(s, b));
            }
            let i = tape.sigmoid(gates[0]);
            let f = tape.sigmoid(gates[1]);
            let g = tape.tanh(gates[2]);
            let o = tape.sigmoid(gates[3]);
            let fc = tape.mul(f, cell);
            let ig = tape.mul(i, g);
            cell = tape.add(fc, ig);
            let tc = tape.tanh(cell);
            hidden = tape.mul(o, tc);
            states[t] = hidden;
        }
        states
    }

    fn apply_dropout(
        &self,
        tape: &mut Tape,
        rep: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let rate = self.model().config.dropout;
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return rep,
        };
        let n = tape.value(rep).len();
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let mask = tape.constant(Tensor::vector(mask));
        tape.mul(rep, mask)
    }
}
