import os
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st

from features.daa import Advisory
from utils.config import OUTPUT_ROOT_ENV


def load_csv(path):
    """Baca CSV jika ada, selain itu None"""
    return pd.read_csv(path) if path.exists() else None


def field_files(run_dir):
    fields = run_dir / "fields"
    return sorted(fields.glob("*.csv")) if fields.exists() else []


def plot_policy_slice(frame):
    """Peta advisory (tau, h) dengan hdot = 0 dan a_prev = COC"""
    taus = np.sort(frame['tau'].unique())
    hs = np.sort(frame['h'].unique())
    codes = frame['advisory'].map({a.name: int(a) for a in Advisory})
    grid = codes.to_numpy().reshape(len(taus), len(hs)).T

    fig, ax = plt.subplots(figsize=(8, 5))
    cmap = plt.get_cmap('viridis', len(Advisory))
    mesh = ax.pcolormesh(taus, hs, grid, cmap=cmap, vmin=-0.5, vmax=len(Advisory) - 0.5, shading='nearest')
    cbar = fig.colorbar(mesh, ax=ax, ticks=range(len(Advisory)))
    cbar.ax.set_yticklabels([a.name for a in Advisory])
    ax.set_xlabel('tau (s)')
    ax.set_ylabel('h (m)')
    ax.set_title('Kebijakan Penghindaran (hdot = 0, a_prev = COC)')
    return fig


def show_field(frame):
    value_cols = [c for c in frame.columns if c == 'weight' or c.startswith('risk[')]
    axis_cols = [c for c in frame.columns if c not in value_cols]
    if len(axis_cols) != 2:
        st.dataframe(frame)
        return
    value = st.selectbox("Kolom", value_cols)
    x, y = axis_cols
    pivot = frame.pivot(index=y, columns=x, values=value)
    fig = go.Figure(go.Heatmap(z=pivot.to_numpy(), x=pivot.columns, y=pivot.index, colorscale='Viridis'))
    fig.update_layout(xaxis_title=x, yaxis_title=y, title=value)
    st.plotly_chart(fig)


def pendulum_tab(run_dir):
    mttf = load_csv(run_dir / "mttf.csv")
    if mttf is None:
        st.info("Belum ada hasil MTTF. Jalankan `python cli.py evaluate`.")
    else:
        st.subheader("⏱️ Mean Time to Failure")
        fig = go.Figure(go.Bar(x=mttf['estimator'], y=mttf['mttf_mean'],
                               error_y=dict(type='data', array=mttf['mttf_se'])))
        fig.update_layout(yaxis_title='MTTF (langkah)')
        st.plotly_chart(fig)
        st.dataframe(mttf)


def daa_tab(run_dir):
    policy = load_csv(run_dir / "policy_slice.csv")
    if policy is not None:
        st.subheader("🛩️ Kebijakan Kontroler")
        st.pyplot(plot_policy_slice(policy))

    summary = load_csv(run_dir / "encounter_summary.csv")
    nmac = load_csv(run_dir / "nmac.csv")
    if summary is not None:
        st.subheader("💥 Jumlah NMAC per Persepsi")
        fig = go.Figure(go.Bar(x=summary['perceiver'], y=summary['nmac_mean'],
                               error_y=dict(type='data', array=summary['nmac_se'])))
        fig.update_layout(yaxis_title='NMAC (rata-rata per percobaan)')
        st.plotly_chart(fig)
        st.dataframe(summary)
    if nmac is not None:
        st.dataframe(nmac)

    cdf = load_csv(run_dir / "risk_cdf.csv")
    if cdf is not None:
        st.subheader("📈 Distribusi Kumulatif Risiko")
        fig = px.line(cdf, x='risk', y='cdf', color='perceiver',
                      labels={'risk': 'Risiko kesalahan persepsi', 'cdf': 'CDF'})
        st.plotly_chart(fig)

    traces = sorted((run_dir / "traces").glob("encounter_*.csv")) if (run_dir / "traces").exists() else []
    if traces:
        st.subheader("🧭 Jejak Pertemuan")
        choice = st.selectbox("Pertemuan", traces, format_func=lambda p: p.stem)
        trace = pd.read_csv(choice)
        col1, col2 = st.columns(2)
        with col1:
            fig = px.line(trace, x='t', y=['own_z', 'intruder_z'], labels={'value': 'Ketinggian (m)'})
            st.plotly_chart(fig)
        with col2:
            fig = px.scatter(trace, x='t', y='risk', color='detected', labels={'risk': 'Risiko'})
            st.plotly_chart(fig)


def main():
    st.title("🎯 Desain Persepsi Berbasis Risiko")

    with st.sidebar:
        st.header("⚙️ Parameter")
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / "runs"
        output = Path(st.text_input("Direktori output", str(root)))
        problem = st.selectbox("Masalah", ["pendulum", "daa"])

    run_dir = output / problem
    if not run_dir.exists():
        st.error(f"Direktori {run_dir} tidak ditemukan. Jalankan `python cli.py solve-risk` terlebih dahulu.")
        return

    report = load_csv(run_dir / "solver_report.csv")
    if report is not None:
        row = report.iloc[0]
        col1, col2, col3 = st.columns(3)
        col1.metric("Waktu Komputasi", f"{row['wall_time_s']:.2f} detik")
        col2.metric("Penggunaan Memori", f"{row['memory_kb']:.0f} KB")
        col3.metric("Sel Terpotong", int(row['clamped_cells']))

    tab1, tab2 = st.tabs(["Hasil", "Medan Risiko"])
    with tab1:
        if problem == "pendulum":
            pendulum_tab(run_dir)
        else:
            daa_tab(run_dir)
    with tab2:
        files = field_files(run_dir)
        if not files:
            st.info("Belum ada medan. Jalankan `python cli.py export-field`.")
        else:
            choice = st.selectbox("Berkas", files, format_func=lambda p: p.stem)
            show_field(pd.read_csv(choice))


if __name__ == "__main__":
    main()
