/**
 * Framed pipe protocol: text headers, binary vector payloads.
 *
 *   EXEC <n>\n<bytes>                 request: job script
 *   NUM <ascii-double>\n              scalar
 *   STR <n>\n<bytes>                  string
 *   VEC <n>\n<n*8 LE float64>         vector (bit-exact doubles)
 *   TBL <ncols> <nrows>\n             table; per column:
 *     COL <name> <type>\n             %le -> nrows*8 bytes, %s -> nrows of <n>\n<bytes>
 *   DONE\n / ERR <n>\n<message>       exchange terminators
 *
 * The decoder is incremental: feed() accepts arbitrary chunk boundaries.
 */

import { TableData } from "./table.js";

export type Frame =
    | { kind: "num"; value: number }
    | { kind: "str"; value: string }
    | { kind: "vec"; value: Float64Array }
    | { kind: "tbl"; value: TableData }
    | { kind: "done" }
    | { kind: "err"; message: string }
    | { kind: "exec"; script: string };

export class ProtocolError extends Error {}

export function encodeExec(script: string): Uint8Array {
    const body = new TextEncoder().encode(script);
    const head = new TextEncoder().encode(`EXEC ${body.length}\n`);
    const out = new Uint8Array(head.length + body.length);
    out.set(head, 0);
    out.set(body, head.length);
    return out;
}

const NL = 0x0a;

export class FrameDecoder {
    private buf = new Uint8Array(0);

    feed(data: Uint8Array): Frame[] {
        if (this.buf.length === 0) {
            this.buf = data.slice();
        } else {
            const merged = new Uint8Array(this.buf.length + data.length);
            merged.set(this.buf, 0);
            merged.set(data, this.buf.length);
            this.buf = merged;
        }
        const frames: Frame[] = [];
        for (;;) {
            const parsed = this.tryParse();
            if (parsed === null) break;
            const [frame, consumed] = parsed;
            this.buf = this.buf.slice(consumed);
            frames.push(frame);
        }
        return frames;
    }

    /** Line ending at the next \n starting at pos, or null if incomplete. */
    private line(pos: number): [string, number] | null {
        const idx = this.buf.indexOf(NL, pos);
        if (idx < 0) return null;
        return [new TextDecoder().decode(this.buf.slice(pos, idx)), idx + 1];
    }

    private doubles(pos: number, n: number): Float64Array {
        // copy into a fresh buffer to guarantee 8-byte alignment
        const bytes = this.buf.slice(pos, pos + 8 * n);
        return new Float64Array(bytes.buffer, 0, n);
    }

    private tryParse(): [Frame, number] | null {
        if (this.buf.length === 0) return null;
        const first = this.line(0);
        if (first === null) return null;
        const [header, pos] = first;
        const parts = header.split(/\s+/).filter((s) => s.length > 0);
        if (parts.length === 0) throw new ProtocolError("empty frame header");
        const tag = parts[0];

        if (tag === "DONE") return [{ kind: "done" }, pos];
        if (tag === "NUM") {
            if (parts.length !== 2) throw new ProtocolError(`bad NUM header: ${header}`);
            return [{ kind: "num", value: Number(parts[1]) }, pos];
        }
        if (tag === "STR" || tag === "ERR" || tag === "EXEC") {
            if (parts.length !== 2) throw new ProtocolError(`bad ${tag} header: ${header}`);
            const n = parseInt(parts[1], 10);
            if (this.buf.length - pos < n) return null;
            const body = new TextDecoder().decode(this.buf.slice(pos, pos + n));
            if (tag === "STR") return [{ kind: "str", value: body }, pos + n];
            if (tag === "ERR") return [{ kind: "err", message: body }, pos + n];
            return [{ kind: "exec", script: body }, pos + n];
        }
        if (tag === "VEC") {
            if (parts.length !== 2) throw new ProtocolError(`bad VEC header: ${header}`);
            const n = parseInt(parts[1], 10);
            if (this.buf.length - pos < 8 * n) return null;
            return [{ kind: "vec", value: this.doubles(pos, n) }, pos + 8 * n];
        }
        if (tag === "TBL") {
            if (parts.length !== 3) throw new ProtocolError(`bad TBL header: ${header}`);
            const ncols = parseInt(parts[1], 10);
            const nrows = parseInt(parts[2], 10);
            const table = new TableData();
            let p = pos;
            for (let c = 0; c < ncols; c++) {
                const colHead = this.line(p);
                if (colHead === null) return null;
                const [cline, p2] = colHead;
                const cparts = cline.split(/\s+/).filter((s) => s.length > 0);
                if (cparts.length !== 3 || cparts[0] !== "COL")
                    throw new ProtocolError(`bad COL header: ${cline}`);
                const [, name, typ] = cparts;
                if (typ === "%le") {
                    if (this.buf.length - p2 < 8 * nrows) return null;
                    table.addColumn(name, this.doubles(p2, nrows));
                    p = p2 + 8 * nrows;
                } else if (typ === "%s") {
                    const vals: string[] = [];
                    let q = p2;
                    for (let r = 0; r < nrows; r++) {
                        const sl = this.line(q);
                        if (sl === null) return null;
                        const [lenLine, q2] = sl;
                        const ns = parseInt(lenLine, 10);
                        if (this.buf.length - q2 < ns) return null;
                        vals.push(new TextDecoder().decode(this.buf.slice(q2, q2 + ns)));
                        q = q2 + ns;
                    }
                    table.addColumn(name, vals);
                    p = q;
                } else {
                    throw new ProtocolError(`unknown column type: ${typ}`);
                }
            }
            return [{ kind: "tbl", value: table }, p];
        }
        throw new ProtocolError(`unknown frame tag: ${tag}`);
    }
}
