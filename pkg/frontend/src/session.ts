/**
 * Session with a beamkit subprocess running `serve --stdio`.
 *
 * The API is blocking-style and single-request: send() frames one job
 * script, recv() resolves with each value the script emitted through
 * send(...) statements, and sync() resolves when the exchange's DONE
 * arrives.  A server-side error rejects the pending receives with the
 * server's message but keeps the session usable.
 */

import { ChildProcessByStdio, spawn } from "node:child_process";
import type { Readable, Writable } from "node:stream";

import { Frame, FrameDecoder, encodeExec } from "./protocol.js";
import { TableData } from "./table.js";

export type Value = number | string | Float64Array | TableData;

export class ServerError extends Error {}

interface Waiter<T> {
    resolve: (v: T) => void;
    reject: (e: Error) => void;
}

export interface SessionOptions {
    command?: string;
    args?: string[];
    env?: NodeJS.ProcessEnv;
    cwd?: string;
}

export class Session {
    private proc: ChildProcessByStdio<Writable, Readable, null>;
    private decoder = new FrameDecoder();
    private values: Value[] = [];
    private valueWaiters: Waiter<Value>[] = [];
    private doneCount = 0;
    private doneWaiters: Waiter<void>[] = [];
    private closed = false;

    constructor(opts: SessionOptions = {}) {
        const command = opts.command ?? "python3";
        const args = opts.args ?? ["-m", "beamkit.cli", "serve", "--stdio"];
        this.proc = spawn(command, args, {
            stdio: ["pipe", "pipe", "inherit"],
            env: opts.env ?? process.env,
            cwd: opts.cwd,
        });
        this.proc.stdout.on("data", (chunk: Buffer) => {
            for (const frame of this.decoder.feed(new Uint8Array(chunk))) {
                this.onFrame(frame);
            }
        });
        this.proc.on("exit", () => {
            this.closed = true;
            const err = new ServerError("server exited");
            for (const w of this.valueWaiters.splice(0)) w.reject(err);
            for (const w of this.doneWaiters.splice(0)) w.reject(err);
        });
    }

    private onFrame(frame: Frame): void {
        switch (frame.kind) {
            case "num":
            case "str":
            case "vec":
            case "tbl": {
                const value = frame.kind === "num" ? frame.value
                    : frame.kind === "str" ? frame.value
                    : frame.kind === "vec" ? frame.value
                    : frame.value;
                const waiter = this.valueWaiters.shift();
                if (waiter) waiter.resolve(value);
                else this.values.push(value);
                break;
            }
            case "done": {
                this.doneCount += 1;
                const waiter = this.doneWaiters.shift();
                if (waiter) waiter.resolve();
                break;
            }
            case "err": {
                const err = new ServerError(frame.message);
                const vw = this.valueWaiters.shift() ?? this.doneWaiters.shift();
                if (vw) vw.reject(err);
                else this.values.length = 0;  // drop stale values of a failed exchange
                break;
            }
            case "exec":
                throw new Error("unexpected EXEC frame from server");
        }
    }

    /** Frame one job script for execution. */
    send(script: string): void {
        if (this.closed) throw new ServerError("session closed");
        this.proc.stdin.write(encodeExec(script));
    }

    /** Next value emitted by the running script. */
    recv(): Promise<Value> {
        if (this.values.length > 0) {
            return Promise.resolve(this.values.shift()!);
        }
        return new Promise<Value>((resolve, reject) => {
            this.valueWaiters.push({ resolve, reject });
        });
    }

    async recvVector(): Promise<Float64Array> {
        const v = await this.recv();
        if (!(v instanceof Float64Array)) throw new ServerError("expected a vector");
        return v;
    }

    async recvTable(): Promise<TableData> {
        const v = await this.recv();
        if (!(v instanceof TableData)) throw new ServerError("expected a table");
        return v;
    }

    /** Resolves when the current exchange's DONE arrives. */
    sync(): Promise<void> {
        if (this.doneCount > 0) {
            this.doneCount -= 1;
            return Promise.resolve();
        }
        return new Promise<void>((resolve, reject) => {
            this.doneWaiters.push({ resolve, reject });
        });
    }

    async close(): Promise<number | null> {
        this.proc.stdin.end();
        if (this.proc.exitCode !== null) return this.proc.exitCode;
        return new Promise((resolve) => this.proc.on("exit", (code) => resolve(code)));
    }
}
