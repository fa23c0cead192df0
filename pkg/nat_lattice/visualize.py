import pandas as pd
import numpy as np
import matplotlib.pyplot as plt
import seaborn as sns
import slugify
import os
import logging

logger = logging.getLogger(__name__)

def ngram_repetition_df(reports):
    """Long-format n-gram repetition counts from a dict of method -> RepetitionReport."""
    rows = list()
    for method, report in reports.items():
        for n, count in sorted(report.ngram_counts.items()):
            rows.append({
                'method': method,
                'n': int(n),
                'count': int(count)
            })
    return pd.DataFrame(rows, columns=['method', 'n', 'count'])

def _save_filename(
    filename_prefix,
    file_identifier,
    filename_extension
):
    if file_identifier is not None:
        return '{}_{}.{}'.format(
            filename_prefix,
            slugify.slugify(file_identifier),
            filename_extension
        )
    return '{}.{}'.format(
        filename_prefix,
        filename_extension
    )

def _finish(
    fig,
    show,
    save,
    save_directory,
    save_filename
):
    path = None
    # Show plot
    if show:
        plt.show()
    # Save plot
    if save:
        path = os.path.join(
            save_directory,
            save_filename
        )
        fig.savefig(path)
        logger.info('Saved plot to {}'.format(path))
    if not show:
        plt.close(fig)
    return path

def plot_ngram_repetition(
    df,
    plot_title=None,
    show=True,
    save=False,
    save_directory='.',
    filename_prefix='ngram_repetition',
    file_identifier=None,
    filename_extension='png',
    fig_width_inches=10.5,
    fig_height_inches=8
):
    if len(df) == 0:
        logger.warning('No n-gram repetition counts to plot')
        return None
    fig, ax = plt.subplots()
    sns.lineplot(
        data=df,
        x='n',
        y='count',
        hue='method',
        marker='o',
        ax=ax
    )
    ax.set_xticks(sorted(df['n'].unique()))
    ax.set_xlabel('N-gram order')
    ax.set_ylabel('Repeated n-gram types')
    if plot_title is not None:
        fig.suptitle(plot_title)
    fig.set_size_inches(fig_width_inches, fig_height_inches)
    return _finish(
        fig,
        show,
        save,
        save_directory,
        _save_filename(filename_prefix, file_identifier, filename_extension)
    )

def plot_loss_history(
    df,
    plot_title=None,
    show=True,
    save=False,
    save_directory='.',
    filename_prefix='loss_history',
    file_identifier=None,
    filename_extension='png',
    fig_width_inches=10.5,
    fig_height_inches=8
):
    fig, ax = plt.subplots()
    hue = 'objective' if 'objective' in df.columns else None
    sns.lineplot(
        data=df,
        x='epoch',
        y='mean_loss',
        hue=hue,
        marker='o',
        ax=ax
    )
    ax.set_xlabel('Epoch')
    ax.set_ylabel('Mean loss')
    if plot_title is not None:
        fig.suptitle(plot_title)
    fig.set_size_inches(fig_width_inches, fig_height_inches)
    return _finish(
        fig,
        show,
        save,
        save_directory,
        _save_filename(filename_prefix, file_identifier, filename_extension)
    )

def plot_transition_matrix(
    transition,
    color_map_name='viridis',
    annotate=False,
    plot_title=None,
    show=True,
    save=False,
    save_directory='.',
    filename_prefix='transition_matrix',
    file_identifier=None,
    filename_extension='png',
    fig_width_inches=8,
    fig_height_inches=8
):
    probs = transition.probs()
    fig, ax = plt.subplots()
    sns.heatmap(
        data=probs,
        cmap=color_map_name,
        mask=~np.triu(np.ones_like(probs, dtype=bool), k=1),
        annot=annotate,
        fmt='.2f',
        square=True,
        linewidths=0.1,
        linecolor='gray',
        cbar_kws={'label': 'Transition probability'},
        ax=ax
    )
    ax.set_xlabel('Next vertex')
    ax.set_ylabel('Current vertex')
    if plot_title is not None:
        ax.set_title(plot_title)
    fig.set_size_inches(fig_width_inches, fig_height_inches)
    return _finish(
        fig,
        show,
        save,
        save_directory,
        _save_filename(filename_prefix, file_identifier, filename_extension)
    )
