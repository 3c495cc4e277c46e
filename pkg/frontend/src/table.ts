/** Column table received over the wire, with dataframe-style conversion. */

export type Column = Float64Array | string[];

export class TableData {
    readonly names: string[] = [];
    private readonly cols = new Map<string, Column>();

    addColumn(name: string, col: Column): void {
        if (this.cols.has(name)) throw new Error(`duplicate column ${name}`);
        this.names.push(name);
        this.cols.set(name, col);
    }

    get ncols(): number {
        return this.names.length;
    }

    get nrows(): number {
        const first = this.cols.get(this.names[0]);
        return first === undefined ? 0 : first.length;
    }

    col(name: string): Column {
        const c = this.cols.get(name);
        if (c === undefined) throw new Error(`no column ${name}`);
        return c;
    }

    /** Rows as plain objects keyed by column name (dataframe-style). */
    toRows(): Record<string, number | string>[] {
        const out: Record<string, number | string>[] = [];
        for (let i = 0; i < this.nrows; i++) {
            const row: Record<string, number | string> = {};
            for (const name of this.names) {
                const c = this.cols.get(name)!;
                row[name] = c[i];
            }
            out.push(row);
        }
        return out;
    }
}
